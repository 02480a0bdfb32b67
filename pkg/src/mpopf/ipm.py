"""Primal-dual interior-point method for convex QPs.

Solves

    minimize  (1/2) x'Px + c'x   s.t.  Ax = b,  Gx <= h

with Mehrotra predictor-corrector steps. Each Newton system is reduced to the
quasi-definite form

    [[P + G' W G + delta I,  A'       ],
     [A,                    -delta I ]]

factorized once per iteration with a sparse LU and polished by iterative
refinement against the unregularized matrix. The regularization keeps rank
deficient equality blocks (redundant balance rows, free phase offsets)
solvable without changing the solution set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class QpResult:
    x: np.ndarray
    y: np.ndarray  # equality multipliers
    z: np.ndarray  # inequality multipliers, >= 0
    s: np.ndarray  # inequality slacks, >= 0
    objective: float
    status: str  # "optimal", "infeasible", "max_iter"
    iterations: int
    kkt_residual: float


def _csr(M, shape) -> sp.csr_matrix:
    if M is None:
        return sp.csr_matrix(shape)
    return sp.csr_matrix(M)


def _fraction_to_boundary(v: np.ndarray, dv: np.ndarray, eta: float = 1.0) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, eta * float(np.min(-v[neg] / dv[neg])))


def _initial_point(P, c, A, b, G, h, At, Gt, Ireg_x, Ireg_y):
    """Least-squares start: ``min (1/2)x'Px + c'x + (1/2)||Gx - h||^2`` s.t. ``Ax = b``,
    then slacks and multipliers shifted into the positive orthant."""
    n, me, mi = c.size, b.size, h.size
    K = sp.bmat([[P + Gt @ G + Ireg_x + 1e-8 * sp.identity(n), At], [A, -Ireg_y]], format="csc")
    try:
        sol = spla.splu(K, permc_spec="COLAMD").solve(np.concatenate([-c + Gt @ h, b]))
    except RuntimeError:
        sol = np.zeros(n + me)
    x, y = sol[:n], sol[n:]
    if not np.all(np.isfinite(sol)):
        x, y = np.zeros(n), np.zeros(me)
    s = h - G @ x
    z = -s.copy()
    if mi:
        s = s + max(0.0, 1.0 - s.min())
        z = z + max(0.0, 1.0 - z.min())
    return x, y, s, z


def solve_qp(
    P,
    c,
    A=None,
    b=None,
    G=None,
    h=None,
    tol: float = 1e-9,
    max_iter: int = 200,
    reg: float = 1e-11,
    refine: int = 5,
) -> QpResult:
    """Solve the QP to a relative KKT residual of ``tol``.

    Returns status ``"optimal"`` on success and ``"max_iter"`` otherwise; use
    :func:`feasibility_gap` to tell an infeasible problem from a slow one.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    P = _csr(P, (n, n))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    A = _csr(A, (b.size, n))
    G = _csr(G, (h.size, n))
    me, mi = b.size, h.size
    At, Gt = A.T.tocsr(), G.T.tocsr()

    Ireg_x = reg * sp.identity(n, format="csr")
    Ireg_y = reg * sp.identity(me, format="csr")
    x, y, s, z = _initial_point(P, c, A, b, G, h, At, Gt, Ireg_x, Ireg_y)

    scale_d = 1.0 + max(np.abs(c).max(initial=0.0), 0.0)
    scale_p = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(h).max(initial=0.0))
    status = "max_iter"
    it = 0
    kkt = np.inf
    best, stall = np.inf, 0

    for it in range(1, max_iter + 1):
        r_d = P @ x + c + At @ y + Gt @ z
        r_p = A @ x - b
        r_g = G @ x + s - h
        mu = float(s @ z) / mi if mi else 0.0
        kkt = max(
            np.abs(r_d).max(initial=0.0) / scale_d,
            np.abs(r_p).max(initial=0.0) / scale_p,
            np.abs(r_g).max(initial=0.0) / scale_p,
            mu,
        )
        if kkt <= tol:
            status = "optimal"
            break
        # iterates blowing up signal an infeasible or unbounded problem
        if not np.isfinite(kkt) or max(np.abs(x).max(initial=0.0), z.max(initial=0.0)) > 1e14:
            break
        if mi and s.min() <= 1e-200:
            break
        # no progress for a long stretch: give up and let the caller diagnose
        if kkt < 0.5 * best:
            best, stall = kkt, 0
        else:
            stall += 1
            if stall >= 30:
                break

        w = z / s
        H = (P + Gt @ sp.diags(w) @ G).tocsr()
        K_reg = sp.bmat([[H + Ireg_x, At], [A, -Ireg_y]], format="csc")
        K_true = sp.bmat([[H, At], [A, None]], format="csr") if me else H
        try:
            lu = spla.splu(K_reg, permc_spec="COLAMD")
        except RuntimeError:
            break

        def newton(r_c):
            rhs_x = -r_d - Gt @ ((z * r_g - r_c) / s)
            rhs = np.concatenate([rhs_x, -r_p])
            sol = lu.solve(rhs)
            for _ in range(refine):
                res = rhs - K_true @ sol if me else rhs - H @ sol
                if np.abs(res).max(initial=0.0) <= 1e-15 * (1.0 + np.abs(rhs).max(initial=0.0)):
                    break
                sol = sol + lu.solve(res)
            dx, dy = sol[:n], sol[n:]
            dz = w * (G @ dx) + (z * r_g - r_c) / s
            ds = -r_g - G @ dx
            return dx, dy, dz, ds

        # predictor
        dx, dy, dz, ds = newton(s * z)
        a_p = _fraction_to_boundary(s, ds)
        a_d = _fraction_to_boundary(z, dz)
        if mi:
            mu_aff = float((s + a_p * ds) @ (z + a_d * dz)) / mi
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            # corrector
            dx, dy, dz, ds = newton(s * z + ds * dz - sigma * mu)
        a_p = min(1.0, 0.99 * _fraction_to_boundary(s, ds))
        a_d = min(1.0, 0.99 * _fraction_to_boundary(z, dz))
        x = x + a_p * dx
        s = s + a_p * ds
        y = y + a_d * dy
        z = z + a_d * dz

    obj = float(0.5 * x @ (P @ x) + c @ x)
    return QpResult(x, y, z, s, obj, status, it, float(kkt))


def feasibility_gap(A, b, G, h, n: int, tol: float = 1e-9) -> float:
    """Least total violation ``min ||Ax - b||_1 + ||max(Gx - h, 0)||_1``.

    Zero (to ``tol``) iff the constraint set is nonempty. Solved as the elastic
    LP with nonnegative violation variables.
    """
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    A = _csr(A, (b.size, n))
    G = _csr(G, (h.size, n))
    me, mi = b.size, h.size
    nv = n + 2 * me + mi
    # variables: x, e_plus, e_minus, t
    Ae = sp.hstack([A, -sp.identity(me), sp.identity(me), sp.csr_matrix((me, mi))])
    Ge = sp.vstack([
        sp.hstack([G, sp.csr_matrix((mi, 2 * me)), -sp.identity(mi)]),
        sp.hstack([sp.csr_matrix((2 * me + mi, n)), -sp.identity(2 * me + mi)]),
    ])
    he = np.concatenate([h, np.zeros(2 * me + mi)])
    ce = np.concatenate([np.zeros(n), np.ones(2 * me + mi)])
    res = solve_qp(sp.csr_matrix((nv, nv)), ce, Ae, b, Ge, he, tol=tol)
    return max(res.objective, 0.0)
