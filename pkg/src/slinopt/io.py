"""Deterministic file output.

np.savez stamps zip entries with the current time, which breaks
byte-for-byte reproducibility of artifacts.  save_arrays_npz writes the
same format with a fixed entry date so identical arrays give identical
files.  CSV/JSON writers use repr-level float precision and no locale.
"""

import io
import json
import zipfile

import numpy as np
from numpy.lib import format as npy_format

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def save_arrays_npz(path, arrays):
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            npy_format.write_array(buf, np.ascontiguousarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=_FIXED_DATE)
            zf.writestr(info, buf.getvalue())


def dump_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_csv(path, header, rows):
    """Plot-ready CSV: full float precision, comma separated."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return np.format_float_scientific(float(v), unique=True)
