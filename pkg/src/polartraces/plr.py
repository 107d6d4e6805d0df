"""Partitioned-low-rank matrices: adaptive dyadic compression and matvec.

A PLR matrix is a dyadic block tree over (rows x cols).  Each block is
either approximated by a rank-capped factor pair certified against a
relative spectral-norm tolerance, split in half along its longer
dimension, or stored dense once it reaches the minimum leaf size.  The
factorizer is a seeded randomized range finder (oversampling 8, one
subspace iteration); every accepted low-rank leaf is re-certified with a
randomized power iteration, so builds either meet the epsilon bound or
fall back to denser representations.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

__all__ = ["PlrMatrix", "AlphaFit", "estimate_alpha"]

_OVERSAMPLE = 8
_POWER_ITERS = 20
_MAGIC = b"PLR1"


def _spectral_norm(matvec, rmatvec, shape, rng, iters=_POWER_ITERS):
    """Randomized power-iteration estimate of the 2-norm of an operator."""
    n = shape[1]
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    s = 0.0
    for _ in range(iters):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = rmatvec(w / nw)
        s = np.linalg.norm(v)
        if s == 0.0:
            return nw
        v /= s
        s = s * nw
    return np.sqrt(s)


def _dense_norm(a, rng):
    return _spectral_norm(lambda v: a @ v, lambda v: a.conj().T @ v, a.shape, rng)


class _Leaf:
    __slots__ = ("kind", "a", "u", "v")

    def __init__(self, kind, a=None, u=None, v=None):
        self.kind = kind  # "dense" | "lowrank"
        self.a = a
        self.u = u
        self.v = v

    @property
    def touches(self):
        if self.kind == "dense":
            return self.a.shape[0] * self.a.shape[1]
        r = self.u.shape[1]
        return r * (self.u.shape[0] + self.v.shape[1])

    def matvec(self, x):
        if self.kind == "dense":
            return self.a @ x
        if self.u.shape[1] == 0:
            return np.zeros(self.u.shape[0], dtype=complex)
        return self.u @ (self.v @ x)

    def to_dense(self, shape):
        if self.kind == "dense":
            return self.a
        if self.u.shape[1] == 0:
            return np.zeros(shape, dtype=complex)
        return self.u @ self.v


class _Split:
    __slots__ = ("axis", "cut", "first", "second")

    def __init__(self, axis, cut, first, second):
        self.axis = axis  # 0 = rows, 1 = cols
        self.cut = cut
        self.first = first
        self.second = second


class PlrMatrix:
    """Compressed complex matrix with certified blockwise accuracy."""

    def __init__(self, root, shape, eps, max_rank, min_leaf):
        self.root = root
        self.shape = shape
        self.eps = eps
        self.max_rank = max_rank
        self.min_leaf = min_leaf
        self.applied_touches = 0
        self.apply_count = 0
        self._touches = None

    # -- construction ------------------------------------------------------
    @classmethod
    def compress(cls, dense, eps=1e-8, max_rank=None, min_leaf=16, seed=0):
        """Adaptive dyadic compression of a dense complex matrix.

        Attempts a rank-<=max_rank approximation of each block; on failure
        splits the longer dimension in half and recurses; blocks at or
        below min_leaf stay dense.  Every low-rank leaf satisfies
        ||block - U V||_2 <= eps * ||block||_2, checked by a randomized
        spectral estimate at build time.
        """
        dense = np.ascontiguousarray(dense, dtype=complex)
        if not 0.0 < eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if max_rank is None:
            max_rank = max(1, int(np.ceil(np.sqrt(min(dense.shape)))))
        if max_rank < 1:
            raise ValueError("max_rank must be at least 1")
        rng = np.random.default_rng(seed)
        depth_cap = int(np.ceil(np.log2(max(min(dense.shape), 2))))
        root = cls._build(dense, eps, max_rank, min_leaf, rng, depth_cap)
        return cls(root, dense.shape, eps, max_rank, min_leaf)

    @classmethod
    def _build(cls, a, eps, max_rank, min_leaf, rng, depth_left):
        r, c = a.shape
        if min(r, c) <= min_leaf or depth_left <= 0:
            return _Leaf("dense", a=a.copy())
        norm = _dense_norm(a, rng)
        if norm == 0.0:
            return _Leaf(
                "lowrank",
                u=np.zeros((r, 0), dtype=complex),
                v=np.zeros((0, c), dtype=complex),
            )
        leaf = cls._try_lowrank(a, norm, eps, max_rank, rng)
        if leaf is not None:
            return leaf
        axis = 0 if r >= c else 1
        cut = (r if axis == 0 else c) // 2
        if axis == 0:
            first = cls._build(a[:cut], eps, max_rank, min_leaf, rng, depth_left - 1)
            second = cls._build(a[cut:], eps, max_rank, min_leaf, rng, depth_left - 1)
        else:
            first = cls._build(a[:, :cut], eps, max_rank, min_leaf, rng, depth_left - 1)
            second = cls._build(a[:, cut:], eps, max_rank, min_leaf, rng, depth_left - 1)
        return _Split(axis, cut, first, second)

    @staticmethod
    def _try_lowrank(a, norm, eps, max_rank, rng):
        r, c = a.shape
        k = min(max_rank + _OVERSAMPLE, r, c)
        omega = rng.standard_normal((c, k)) + 1j * rng.standard_normal((c, k))
        y = a @ omega
        q, _ = np.linalg.qr(y)
        # one subspace iteration sharpens the range estimate
        q, _ = np.linalg.qr(a @ (a.conj().T @ q))
        b = q.conj().T @ a
        ub, s, vh = np.linalg.svd(b, full_matrices=False)
        keep = int(np.searchsorted(-s, -eps * norm))  # singular values > eps*norm
        if keep > max_rank:
            return None
        keep = max(keep, 0)
        u = (q @ ub[:, :keep]) * s[:keep]
        v = vh[:keep]
        err = _spectral_norm(
            lambda x: a @ x - u @ (v @ x),
            lambda x: a.conj().T @ x - v.conj().T @ (u.conj().T @ x),
            a.shape,
            rng,
        )
        if err <= eps * norm:
            return _Leaf("lowrank", u=u, v=v)
        return None

    # -- application --------------------------------------------------------
    @property
    def touches(self):
        """Payload elements visited by one matvec (sum over leaves)."""
        if self._touches is None:
            total = 0
            stack = [self.root]
            while stack:
                node = stack.pop()
                if isinstance(node, _Split):
                    stack.extend((node.first, node.second))
                else:
                    total += node.touches
            self._touches = total
        return self._touches

    def matvec(self, x):
        x = np.asarray(x, dtype=complex)
        if x.shape[0] != self.shape[1]:
            raise ValueError(f"shape mismatch: {self.shape} @ {x.shape}")
        out = self._matvec(self.root, self.shape, x)
        self.applied_touches += self.touches
        self.apply_count += 1
        return out

    def _matvec(self, node, shape, x):
        if isinstance(node, _Leaf):
            return node.matvec(x)
        r, c = shape
        if node.axis == 0:
            top = self._matvec(node.first, (node.cut, c), x)
            bot = self._matvec(node.second, (r - node.cut, c), x)
            return np.concatenate([top, bot])
        left = self._matvec(node.first, (r, node.cut), x[: node.cut])
        right = self._matvec(node.second, (r, c - node.cut), x[node.cut :])
        return left + right

    def __matmul__(self, x):
        x = np.asarray(x)
        if x.ndim == 1:
            return self.matvec(x)
        return np.stack([self.matvec(x[:, i]) for i in range(x.shape[1])], axis=1)

    def to_dense(self):
        return self._to_dense(self.root, self.shape)

    def _to_dense(self, node, shape):
        if isinstance(node, _Leaf):
            return node.to_dense(shape)
        r, c = shape
        out = np.zeros(shape, dtype=complex)
        if node.axis == 0:
            out[: node.cut] = self._to_dense(node.first, (node.cut, c))
            out[node.cut :] = self._to_dense(node.second, (r - node.cut, c))
        else:
            out[:, : node.cut] = self._to_dense(node.first, (r, node.cut))
            out[:, node.cut :] = self._to_dense(node.second, (r, c - node.cut))
        return out

    def leaves(self):
        """(row0, col0, rows, cols, kind, rank) for every leaf."""
        out = []

        def walk(node, r0, c0, shape):
            if isinstance(node, _Leaf):
                rank = None if node.kind == "dense" else node.u.shape[1]
                out.append((r0, c0, shape[0], shape[1], node.kind, rank))
                return
            r, c = shape
            if node.axis == 0:
                walk(node.first, r0, c0, (node.cut, c))
                walk(node.second, r0 + node.cut, c0, (r - node.cut, c))
            else:
                walk(node.first, r0, c0, (r, node.cut))
                walk(node.second, r0, c0 + node.cut, (r, c - node.cut))

        walk(self.root, 0, 0, self.shape)
        return out

    # -- serialization (preorder tree, little-endian complex payloads) ------
    def to_bytes(self):
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<qqdqq", *self.shape, self.eps, self.max_rank, self.min_leaf))
        self._write(buf, self.root)
        return buf.getvalue()

    def _write(self, buf, node):
        if isinstance(node, _Split):
            buf.write(struct.pack("<bbq", 2, node.axis, node.cut))
            self._write(buf, node.first)
            self._write(buf, node.second)
        elif node.kind == "dense":
            buf.write(struct.pack("<bqq", 0, *node.a.shape))
            buf.write(node.a.astype("<c16").tobytes())
        else:
            buf.write(struct.pack("<bqqq", 1, node.u.shape[0], node.u.shape[1], node.v.shape[1]))
            buf.write(node.u.astype("<c16").tobytes())
            buf.write(node.v.astype("<c16").tobytes())

    @classmethod
    def from_bytes(cls, data):
        buf = io.BytesIO(data)
        if buf.read(4) != _MAGIC:
            raise ValueError("not a PLR blob")
        rows, cols, eps, max_rank, min_leaf = struct.unpack("<qqdqq", buf.read(40))

        def read_node():
            kind = struct.unpack("<b", buf.read(1))[0]
            if kind == 2:
                axis, cut = struct.unpack("<bq", buf.read(9))
                first = read_node()
                second = read_node()
                return _Split(axis, cut, first, second)
            if kind == 0:
                r, c = struct.unpack("<qq", buf.read(16))
                a = np.frombuffer(buf.read(16 * r * c), dtype="<c16").reshape(r, c)
                return _Leaf("dense", a=a.astype(complex))
            r, k, c = struct.unpack("<qqq", buf.read(24))
            u = np.frombuffer(buf.read(16 * r * k), dtype="<c16").reshape(r, k)
            v = np.frombuffer(buf.read(16 * k * c), dtype="<c16").reshape(k, c)
            return _Leaf("lowrank", u=u.astype(complex), v=v.astype(complex))

        root = read_node()
        return cls(root, (rows, cols), eps, int(max_rank), int(min_leaf))


@dataclass(frozen=True)
class AlphaFit:
    """Least-squares exponent of touches ~ n^(2 alpha)."""

    alpha: float
    slope: float
    stderr: float
    residual: float


def estimate_alpha(sizes, touches):
    """Fit log(touches) = 2*alpha*log(n) + const over measured samples.

    Needs at least 3 sizes spanning a factor of 4; returns the fitted
    alpha (slope/2 in the n^(2 alpha) convention) with the slope standard
    error and the rms log-residual.
    """
    sizes = np.asarray(sizes, dtype=float)
    touches = np.asarray(touches, dtype=float)
    if sizes.size < 3:
        raise ValueError("need at least 3 size samples")
    if sizes.max() / sizes.min() < 4.0:
        raise ValueError("size samples must span at least a 4x range")
    x = np.log(sizes)
    y = np.log(touches)
    coeff, cov = np.polyfit(x, y, 1, cov=True)
    slope = coeff[0]
    resid = y - np.polyval(coeff, x)
    return AlphaFit(
        alpha=slope / 2.0,
        slope=slope,
        stderr=float(np.sqrt(cov[0, 0])),
        residual=float(np.sqrt(np.mean(resid**2))),
    )
