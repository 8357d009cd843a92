"""Packed storage for symmetric matrices.

Symmetric n x n matrices are stored as the upper triangle in row-major
order, length n*(n+1)//2.  All helpers broadcast over leading batch axes.
"""

import numpy as np

_INDEX_CACHE = {}


def packed_dim(n):
    return n * (n + 1) // 2


def _triu_ix(n):
    try:
        return _INDEX_CACHE[n]
    except KeyError:
        ix = np.triu_indices(n)
        # weight 2 on off-diagonal entries, used by trace/gradient folding
        w = np.where(ix[0] == ix[1], 1.0, 2.0)
        _INDEX_CACHE[n] = (ix[0], ix[1], w)
        return _INDEX_CACHE[n]


def pack(mat):
    """Upper triangle of (..., n, n) as (..., n*(n+1)//2)."""
    n = mat.shape[-1]
    rows, cols, _ = _triu_ix(n)
    return mat[..., rows, cols]


def unpack(vec, n):
    """Inverse of pack: (..., n*(n+1)//2) -> symmetric (..., n, n)."""
    rows, cols, _ = _triu_ix(n)
    out = np.zeros(vec.shape[:-1] + (n, n), dtype=vec.dtype)
    out[..., rows, cols] = vec
    out[..., cols, rows] = vec
    return out


def pack_weights(n):
    """Multiplicity of each packed slot (1 on the diagonal, 2 off it)."""
    return _triu_ix(n)[2]


def pack_gradient(mat):
    """Gradient wrt packed variables of a scalar whose matrix gradient is
    the symmetric `mat`: off-diagonal slots pick up both mirror entries."""
    n = mat.shape[-1]
    rows, cols, w = _triu_ix(n)
    return mat[..., rows, cols] * w


def symmetrize(mat):
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


_BASIS_CACHE = {}


def _packed_basis(n):
    """Unit packed vectors unpacked to matrices, shape (ps, n, n)."""
    try:
        return _BASIS_CACHE[n]
    except KeyError:
        ps = packed_dim(n)
        basis = unpack(np.eye(ps), n)
        _BASIS_CACHE[n] = basis
        return basis


def packed_lyap_operator(M):
    """Dense matrix of delta -> M delta + delta M^T on packed symmetrics.

    M is (n, n) or a batch (..., n, n); the result is (..., ps, ps) acting
    on packed vectors, used for Newton steps on Riccati-type equations and
    for assembling covariance-block Jacobians.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    basis = _packed_basis(n)
    MB = M[..., None, :, :] @ basis
    BMt = basis @ np.swapaxes(M, -1, -2)[..., None, :, :]
    return np.swapaxes(pack(MB + BMt), -1, -2)


def project_psd(mat, floor=0.0, tol=-1e-10):
    """Clamp negative eigenvalues of a symmetric matrix batch.

    Returns (projected, n_projected) where n_projected counts batch members
    whose minimum eigenvalue fell below `tol`.  Matrices above the tolerance
    are passed through untouched.
    """
    w = np.linalg.eigvalsh(mat)
    bad = w[..., 0] < tol
    n_bad = int(np.count_nonzero(bad))
    if n_bad == 0:
        return mat, 0
    out = np.array(mat, copy=True)
    idx = np.argwhere(bad)
    for flat in idx:
        key = tuple(flat)
        wi, vi = np.linalg.eigh(mat[key])
        wi = np.clip(wi, floor, None)
        out[key] = (vi * wi) @ vi.T
    return out, n_bad
