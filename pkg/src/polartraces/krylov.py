"""Preconditioned GMRES and BiCGstab over abstract complex linear operators.

Operators and preconditioners are callables on flat complex vectors.  Both
solvers are left-preconditioned and report relative preconditioned
residual histories.  BiCGstab counts half steps as 0.5 iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["KrylovConfig", "KrylovResult", "KrylovBreakdown", "gmres", "bicgstab", "solve"]


@dataclass(frozen=True)
class KrylovConfig:
    method: str = "gmres"
    ktol: float = 1e-7
    max_iter: int = 200
    restart: int = 0  # 0 = no restart
    seed: int = 0

    def __post_init__(self):
        if self.ktol <= 0:
            raise ValueError("ktol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.method not in ("gmres", "bicgstab"):
            raise ValueError(f"unknown Krylov method {self.method!r}")


@dataclass
class KrylovResult:
    x: np.ndarray
    iterations: float
    residuals: list[float] = field(default_factory=list)
    converged: bool = True


class KrylovBreakdown(RuntimeError):
    def __init__(self, message, basis_size=None, residuals=None):
        super().__init__(message)
        self.basis_size = basis_size
        self.residuals = residuals or []


def _as_op(f):
    return (lambda v: v) if f is None else f


def gmres(op, rhs, precond=None, ktol=1e-7, max_iter=200, restart=0, x0=None):
    """Left-preconditioned GMRES with modified Gram-Schmidt Arnoldi.

    Solves P A x = P b for the callable pair (op, precond); the residual
    history is the relative preconditioned residual, which is monotone
    non-increasing within each restart cycle.
    """
    precond = _as_op(precond)
    b = precond(np.asarray(rhs, dtype=complex))
    n = b.size
    beta0 = np.linalg.norm(b)
    if beta0 == 0.0:
        return KrylovResult(np.zeros(n, dtype=complex), 0.0, [0.0], True)

    x = np.zeros(n, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex).copy()
    cycle = restart if restart > 0 else max_iter
    residuals = []
    total = 0

    while total < max_iter:
        r = b - precond(op(x)) if (total > 0 or x0 is not None) else b.copy()
        beta = np.linalg.norm(r)
        if beta / beta0 <= ktol:
            residuals.append(beta / beta0)
            return KrylovResult(x, float(total), residuals, True)
        m = min(cycle, max_iter - total)
        V = np.zeros((m + 1, n), dtype=complex)
        V[0] = r / beta
        Hcol = np.zeros((m + 1, m), dtype=complex)
        # Givens rotations of the running QR of the Hessenberg matrix
        cs = np.zeros(m, dtype=complex)
        sn = np.zeros(m, dtype=complex)
        g = np.zeros(m + 1, dtype=complex)
        g[0] = beta
        k = 0
        for j in range(m):
            w = precond(op(V[j]))
            for i in range(j + 1):
                Hcol[i, j] = np.vdot(V[i], w)
                w -= Hcol[i, j] * V[i]
            hnext = np.linalg.norm(w)
            Hcol[j + 1, j] = hnext
            # apply accumulated rotations to the new column
            for i in range(j):
                t = cs[i] * Hcol[i, j] + sn[i] * Hcol[i + 1, j]
                Hcol[i + 1, j] = -np.conj(sn[i]) * Hcol[i, j] + np.conj(cs[i]) * Hcol[i + 1, j]
                Hcol[i, j] = t
            denom = np.sqrt(abs(Hcol[j, j]) ** 2 + hnext**2)
            if denom == 0.0:
                raise KrylovBreakdown(
                    f"GMRES breakdown: zero Hessenberg column at basis size {j + 1}",
                    basis_size=j + 1,
                    residuals=residuals,
                )
            cs[j] = np.conj(Hcol[j, j]) / denom
            sn[j] = hnext / denom
            Hcol[j, j] = cs[j] * Hcol[j, j] + sn[j] * hnext
            g[j + 1] = -np.conj(sn[j]) * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            k = j + 1
            res = abs(g[j + 1]) / beta0
            residuals.append(res)
            if hnext == 0.0:
                # happy breakdown: the Krylov space is invariant
                if res > ktol:
                    raise KrylovBreakdown(
                        f"GMRES happy breakdown before convergence at basis size {k}",
                        basis_size=k,
                        residuals=residuals,
                    )
                break
            V[j + 1] = w / hnext
            if res <= ktol:
                break
        y = np.zeros(k, dtype=complex)
        for i in range(k - 1, -1, -1):
            y[i] = (g[i] - Hcol[i, i + 1 : k] @ y[i + 1 : k]) / Hcol[i, i]
        x = x + V[:k].T @ y
        if residuals[-1] <= ktol:
            return KrylovResult(x, float(total), residuals, True)

    return KrylovResult(x, float(total), residuals, False)


def bicgstab(op, rhs, precond=None, ktol=1e-7, max_iter=200, x0=None, seed=0):
    """Left-preconditioned BiCGstab; half steps count as 0.5 iterations.

    The shadow residual is the initial preconditioned residual, so runs are
    deterministic for fixed inputs (seed kept for interface parity).
    """
    precond = _as_op(precond)
    b = precond(np.asarray(rhs, dtype=complex))
    n = b.size
    beta0 = np.linalg.norm(b)
    if beta0 == 0.0:
        return KrylovResult(np.zeros(n, dtype=complex), 0.0, [0.0], True)

    pa = lambda v: precond(op(v))
    x = np.zeros(n, dtype=complex) if x0 is None else np.asarray(x0, dtype=complex).copy()
    r = b - pa(x) if (x0 is not None) else b.copy()
    r0 = r.copy()
    rho = alpha = omega = 1.0 + 0.0j
    v = np.zeros(n, dtype=complex)
    p = np.zeros(n, dtype=complex)
    residuals = [np.linalg.norm(r) / beta0]
    count = 0.0

    for _ in range(int(np.ceil(max_iter))):
        rho_new = np.vdot(r0, r)
        if abs(rho_new) < 1e-300 * beta0**2:
            raise KrylovBreakdown(
                f"BiCGstab breakdown (rho ~ 0) after {count} iterations", residuals=residuals
            )
        beta = (rho_new / rho) * (alpha / omega) if count > 0 else 0.0
        rho = rho_new
        p = r + beta * (p - omega * v) if count > 0 else r.copy()
        v = pa(p)
        denom = np.vdot(r0, v)
        if abs(denom) < 1e-300 * beta0**2:
            raise KrylovBreakdown(
                f"BiCGstab breakdown (r0.v ~ 0) after {count} iterations", residuals=residuals
            )
        alpha = rho / denom
        s = r - alpha * v
        count += 0.5
        res = np.linalg.norm(s) / beta0
        residuals.append(res)
        if res <= ktol:
            x = x + alpha * p
            return KrylovResult(x, count, residuals, True)
        t = pa(s)
        tt = np.vdot(t, t)
        if abs(tt) == 0.0:
            raise KrylovBreakdown(
                f"BiCGstab breakdown (t = 0) after {count} iterations", residuals=residuals
            )
        omega = np.vdot(t, s) / tt
        x = x + alpha * p + omega * s
        r = s - omega * t
        count += 0.5
        res = np.linalg.norm(r) / beta0
        residuals.append(res)
        if res <= ktol:
            return KrylovResult(x, count, residuals, True)
        if count >= max_iter:
            break

    return KrylovResult(x, count, residuals, False)


def solve(op, rhs, config, precond=None, x0=None):
    """Dispatch on config.method."""
    if config.method == "gmres":
        return gmres(
            op, rhs, precond=precond, ktol=config.ktol, max_iter=config.max_iter,
            restart=config.restart, x0=x0,
        )
    return bicgstab(
        op, rhs, precond=precond, ktol=config.ktol, max_iter=config.max_iter,
        x0=x0, seed=config.seed,
    )
