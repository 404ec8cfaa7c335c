"""Deterministic numeric kernels: seeded random streams and symmetric eigen-math.

Everything here is pure and platform-stable: the random streams are
counter-based (Philox) so a (seed, stream_id) pair names the same sequence
on any machine, and the eigensolver is a cyclic Jacobi iteration whose
result depends only on its input.
"""

from __future__ import annotations

import hashlib

import numpy as np


class DimensionError(ValueError):
    """Matrix has the wrong shape for the requested operation."""


class SymmetryError(ValueError):
    """Matrix is not symmetric within tolerance."""


class NotPSDError(ValueError):
    """Matrix has a negative eigenvalue beyond the PSD tolerance."""


# ---------------------------------------------------------------------------
# Seeded random streams
# ---------------------------------------------------------------------------


class SeededStream:
    """Counter-based random stream identified by (seed, stream_id).

    Streams are value-like: construct one per logical consumer and derive
    sub-streams with :meth:`derive` instead of sharing a stream across
    threads. Identical (seed, stream_id) pairs produce identical draws on
    every platform.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = int(stream_id) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(
            np.random.Philox(key=[self.seed, self.stream_id])
        )

    def derive(self, *labels) -> "SeededStream":
        """Split off an independent sub-stream named by `labels`.

        Labels may be strings or integers; the derivation is a stable hash,
        so e.g. ``stream.derive("epoch", 3)`` names the same sub-stream in
        every run.
        """
        h = hashlib.sha256()
        h.update(f"{self.seed}:{self.stream_id}".encode())
        for label in labels:
            h.update(b"/")
            h.update(str(label).encode())
        digest = h.digest()
        seed = int.from_bytes(digest[:8], "little")
        stream_id = int.from_bytes(digest[8:16], "little")
        return SeededStream(seed, stream_id)

    # Thin delegations; `random` defines the stream's canonical draw order.

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def choice(self, seq):
        """Uniform pick from a non-empty sequence."""
        if len(seq) == 0:
            raise ValueError("cannot choose from an empty sequence")
        return seq[int(self._gen.integers(0, len(seq)))]

    def shuffled(self, seq: list) -> list:
        return [seq[i] for i in self._gen.permutation(len(seq))]

    def __repr__(self):
        return f"SeededStream(seed={self.seed}, stream_id={self.stream_id})"


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition (cyclic Jacobi)
# ---------------------------------------------------------------------------


def _check_symmetric(a: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix contains non-finite entries")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale > 0 and np.max(np.abs(a - a.T)) > tol * scale:
        raise SymmetryError("matrix is not symmetric within 1e-9 relative")
    return a


def sym_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending
    and eigenvectors as orthonormal columns. The sign of each column is
    fixed so its largest-magnitude entry is positive, making the output
    fully deterministic.

    Sweeps run until the largest off-diagonal entry drops below
    1e-12 * ||A||_F. Intended for moderate sizes (descriptor
    dimensionalities, K <= 512).
    """
    a = _check_symmetric(a)
    n = a.shape[0]
    if n == 0:
        return np.empty(0), np.empty((0, 0))

    work = (a + a.T) / 2.0
    vecs = np.eye(n)
    threshold = 1e-12 * np.linalg.norm(work)

    if threshold > 0:
        for _sweep in range(100):
            off = 0.0
            for p in range(n - 1):
                row = np.abs(work[p, p + 1 :])
                if row.size:
                    off = max(off, row.max())
            if off <= threshold:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = work[p, q]
                    if abs(apq) <= threshold:
                        continue
                    _jacobi_rotate(work, vecs, p, q)

    vals = np.diagonal(work).copy()
    # Stable descending sort: ties keep original index order.
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    # Sign convention: largest-magnitude entry of each column positive;
    # argmax picks the lowest index on ties.
    for j in range(n):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vals, vecs


def _jacobi_rotate(a: np.ndarray, v: np.ndarray, p: int, q: int) -> None:
    """One Jacobi rotation zeroing a[p, q], applied in place to a and v."""
    app, aqq, apq = a[p, p], a[q, q], a[p, q]
    # Stable rotation: t = sign(theta) / (|theta| + sqrt(theta^2 + 1)).
    theta = (aqq - app) / (2.0 * apq)
    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
    if theta == 0.0:
        t = 1.0
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c

    row_p = a[p, :].copy()
    row_q = a[q, :].copy()
    a[p, :] = c * row_p - s * row_q
    a[q, :] = s * row_p + c * row_q
    col_p = a[:, p].copy()
    col_q = a[:, q].copy()
    a[:, p] = c * col_p - s * col_q
    a[:, q] = s * col_p + c * col_q
    a[p, q] = 0.0
    a[q, p] = 0.0
    a[p, p] = c * c * app - 2.0 * s * c * apq + s * s * aqq
    a[q, q] = s * s * app + 2.0 * s * c * apq + c * c * aqq

    col_p = v[:, p].copy()
    col_q = v[:, q].copy()
    v[:, p] = c * col_p - s * col_q
    v[:, q] = s * col_p + c * col_q


def inv_sqrt_psd(
    a: np.ndarray, rcond: float = 1e-10, return_rank: bool = False
):
    """Inverse square root of a symmetric PSD matrix.

    Eigenvalues below rcond * lambda_max are treated as zero, so on a
    rank-deficient input this is the pseudo-inverse square root restricted
    to the numerical range. Raises NotPSDError when an eigenvalue falls
    below -rcond * lambda_max.
    """
    vals, vecs = sym_eig(a)
    lam_max = float(vals[0]) if vals.size else 0.0
    cutoff = rcond * max(lam_max, 0.0)
    if vals.size and vals[-1] < -cutoff:
        raise NotPSDError(
            f"eigenvalue {vals[-1]:.3e} below -rcond*lambda_max ({-cutoff:.3e})"
        )
    inv = np.zeros_like(vals)
    keep = vals > cutoff
    inv[keep] = 1.0 / np.sqrt(vals[keep])
    b = (vecs * inv) @ vecs.T
    b = (b + b.T) / 2.0
    if return_rank:
        return b, int(np.count_nonzero(vals > cutoff))
    return b


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of a scalar function at x by central finite differences.

    Works in 64-bit regardless of the input dtype. fn is called with a
    temporarily perturbed copy of x and must not retain a reference to it.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(fn(x))
        flat[i] = orig - h
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
