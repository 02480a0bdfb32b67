"""Proximal operators of devices whose cost is the value of a small QP.

A device cost of the form

    f(p, theta) = min_s  s'Qs + q's   s.t.  A1 p + A2 theta + A3 s <= rhs

(rows flagged in ``eq_mask`` hold with equality) has no closed-form prox. We
evaluate it with a few iterations of the classic QP splitting: equality-
constrained QP in ``(p, theta, s, alpha)``, projection of the slack ``beta``
onto the nonpositive orthant, scaled dual update. The equality-constrained
step reuses one sparse factorization of the bordered KKT matrix

    [[H,  C'       ],
     [C, -I / omega]]        H = diag(rho_p I, rho_theta I, 2Q),  C = [A1 A2 A3]

for every device in a batch, so the cost of a prox evaluation is a handful of
triangular solves. Rows flagged as equalities get a zero diagonal in the
bottom-right block, so they hold exactly after every solve and carry no slack.
An optional relaxation factor in ``[1, 2)`` blends the new ``alpha`` with the
previous ``beta`` before the projection; 1 gives the plain iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass(eq=False)
class QpDeviceForm:
    """A batch of ``B`` QP device costs sharing one sparsity structure.

    ``C`` and ``Q`` are stored as a shared pattern ``(rows, cols)`` with
    per-device values ``(B, nnz)``. Columns of ``C`` index the stacked vector
    ``(p, theta, s)`` with ``p`` and ``theta`` flattened terminal-major.
    """

    tau: int
    horizon: int
    num_local: int
    c_rows: np.ndarray
    c_cols: np.ndarray
    c_vals: np.ndarray
    q_rows: np.ndarray
    q_cols: np.ndarray
    q_vals: np.ndarray
    q: np.ndarray
    rhs: np.ndarray
    eq_mask: np.ndarray

    @property
    def batch(self) -> int:
        return self.q.shape[0]

    @property
    def num_rows(self) -> int:
        return self.rhs.shape[1]

    @property
    def num_primal(self) -> int:
        return 2 * self.tau * self.horizon + self.num_local

    @property
    def kkt_dim(self) -> int:
        return self.num_primal + self.num_rows

    @classmethod
    def from_dense(cls, Q, q, A1, A2, A3, rhs, eq_mask, tau: int, horizon: int) -> "QpDeviceForm":
        Q = np.asarray(Q, dtype=float)
        q = np.asarray(q, dtype=float)
        C = np.concatenate([np.asarray(A1, float), np.asarray(A2, float), np.asarray(A3, float)], axis=2)
        B = q.shape[0]
        rows, cols = np.nonzero(np.any(C != 0, axis=0))
        qr, qc = np.nonzero(np.any(Q != 0, axis=0))
        eq_mask = np.asarray(eq_mask, dtype=bool)
        if eq_mask.ndim == 2:
            eq_mask = eq_mask[0]
        return cls(
            tau=tau,
            horizon=horizon,
            num_local=q.shape[1],
            c_rows=rows,
            c_cols=cols,
            c_vals=C[:, rows, cols].reshape(B, -1),
            q_rows=qr,
            q_cols=qc,
            q_vals=Q[:, qr, qc].reshape(B, -1),
            q=q,
            rhs=np.asarray(rhs, dtype=float).reshape(B, -1),
            eq_mask=eq_mask,
        )

    def dense(self) -> dict[str, np.ndarray]:
        """Dense ``Q, q, A1, A2, A3, rhs, eq_mask`` with a leading batch axis."""
        B, m, mu = self.batch, self.num_rows, self.num_local
        tT = self.tau * self.horizon
        C = np.zeros((B, m, self.num_primal))
        C[:, self.c_rows, self.c_cols] = self.c_vals
        Q = np.zeros((B, mu, mu))
        Q[:, self.q_rows, self.q_cols] = self.q_vals
        return {
            "Q": Q,
            "q": self.q.copy(),
            "A1": C[:, :, :tT],
            "A2": C[:, :, tT : 2 * tT],
            "A3": C[:, :, 2 * tT :],
            "rhs": self.rhs.copy(),
            "eq_mask": np.broadcast_to(self.eq_mask, (B, m)).copy(),
        }


def battery_form(alpha, beta, power, duration, horizon: int) -> QpDeviceForm:
    """QP encoding of the storage device.

    Local variables are charge ``c`` (T), discharge ``d`` (T) and state of
    charge ``s`` (T + 1); ``mu = 3T + 1`` and there are ``2T + 2`` equality rows
    followed by ``6T + 2`` inequality rows.
    """
    alpha, beta, power, duration = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (alpha, beta, power, duration))
    B, T = alpha.shape[0], horizon
    P0, C0, D0, S0 = 0, 2 * T, 3 * T, 4 * T  # column offsets
    t = np.arange(T)
    ts = np.arange(T + 1)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        r, c = np.broadcast_arrays(np.asarray(r), np.asarray(c))
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, (B, r.size)) if np.ndim(v) == 2 else np.full((B, r.size), v))

    # p = d - c
    add(t, P0 + t, 1.0)
    add(t, C0 + t, 1.0)
    add(t, D0 + t, -1.0)
    # s_{t+1} = s_t + beta c_t - d_t
    r = T + t
    add(r, S0 + t + 1, 1.0)
    add(r, S0 + t, -1.0)
    add(r, C0 + t, -beta[:, None] * np.ones((1, T)))
    add(r, D0 + t, 1.0)
    add(2 * T, S0, 1.0)
    add(2 * T + 1, S0 + T, 1.0)
    n_eq = 2 * T + 2
    r0 = n_eq
    add(r0 + t, C0 + t, -1.0)
    add(r0 + T + t, C0 + t, 1.0)
    add(r0 + 2 * T + t, D0 + t, -1.0)
    add(r0 + 3 * T + t, D0 + t, 1.0)
    add(r0 + 4 * T + ts, S0 + ts, -1.0)
    add(r0 + 5 * T + 1 + ts, S0 + ts, 1.0)
    m = r0 + 6 * T + 2

    rhs = np.zeros((B, m))
    rhs[:, r0 + T : r0 + 2 * T] = power[:, None]
    rhs[:, r0 + 3 * T : r0 + 4 * T] = power[:, None]
    rhs[:, r0 + 5 * T + 1 : r0 + 6 * T + 2] = (duration * power)[:, None]
    q = np.zeros((B, 3 * T + 1))
    q[:, T : 2 * T] = alpha[:, None]
    eq_mask = np.zeros(m, dtype=bool)
    eq_mask[:n_eq] = True
    return QpDeviceForm(
        tau=1,
        horizon=T,
        num_local=3 * T + 1,
        c_rows=np.concatenate(rows),
        c_cols=np.concatenate(cols),
        c_vals=np.concatenate(vals, axis=1),
        q_rows=np.zeros(0, dtype=np.int64),
        q_cols=np.zeros(0, dtype=np.int64),
        q_vals=np.zeros((B, 0)),
        q=q,
        rhs=rhs,
        eq_mask=eq_mask,
    )


def _assemble_kkt(form: QpDeviceForm, rho_p: float, rho_theta: float, omega: float) -> sp.csc_matrix:
    B, nx, m = form.batch, form.num_primal, form.num_rows
    nk = nx + m
    tT = form.tau * form.horizon
    # equality rows are enforced exactly inside the KKT solve (zero diagonal)
    diag = np.concatenate([
        np.full(tT, rho_p), np.full(tT, rho_theta), np.zeros(form.num_local),
        np.where(form.eq_mask, 0.0, -1.0 / omega),
    ])
    d_idx = np.arange(nk)
    keep = diag != 0
    r = [d_idx[keep], 2 * tT + form.q_rows, nx + form.c_rows, form.c_cols]
    c = [d_idx[keep], 2 * tT + form.q_cols, form.c_cols, nx + form.c_rows]
    rows = np.concatenate(r)
    cols = np.concatenate(c)
    vals = np.concatenate(
        [np.broadcast_to(diag[keep], (B, keep.sum())), 2.0 * form.q_vals, form.c_vals, form.c_vals],
        axis=1,
    )
    offs = (np.arange(B) * nk)[:, None]
    K = sp.coo_matrix(
        (vals.ravel(), ((rows[None] + offs).ravel(), (cols[None] + offs).ravel())),
        shape=(B * nk, B * nk),
    )
    return K.tocsc()


@dataclass(eq=False)
class QpProxWorkspace:
    """Cached KKT factorization plus the inner iterates of every device."""

    form: QpDeviceForm
    rho_p: float
    rho_theta: float
    omega: float
    lu: object
    beta: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray = None
    primal: np.ndarray = None
    history: list = field(default_factory=list)

    def matches(self, rho_p: float, rho_theta: float, omega: float) -> bool:
        return (self.rho_p, self.rho_theta, self.omega) == (rho_p, rho_theta, omega)

    def reset(self) -> None:
        self.beta = np.zeros_like(self.beta)
        self.lam = np.zeros_like(self.lam)
        self.alpha = None
        self.primal = None
        self.history = []

    def local(self) -> np.ndarray:
        return self.primal[:, 2 * self.form.tau * self.form.horizon :]

    def local_cost(self) -> np.ndarray:
        """``s'Qs + q's`` at the latest local iterate, per device."""
        s = self.local()
        f = self.form
        quad = np.zeros(f.batch)
        if f.q_vals.size:
            quad = np.einsum("bk,bk->b", f.q_vals, s[:, f.q_rows] * s[:, f.q_cols])
        return quad + np.einsum("bi,bi->b", f.q, s)


def build_workspace(
    form: QpDeviceForm,
    rho_p: float,
    rho_theta: float,
    omega: float = 1.0,
    warm: QpProxWorkspace | None = None,
) -> QpProxWorkspace:
    """Factorize the bordered KKT matrix for all devices of ``form``.

    ``warm`` carries the inner slack and dual iterates over from a previous
    workspace of the same structure (e.g. after a penalty change).
    """
    if min(rho_p, rho_theta, omega) <= 0:
        raise ValueError("penalties must be positive")
    K = _assemble_kkt(form, rho_p, rho_theta, omega)
    try:
        lu = spla.splu(K, permc_spec="COLAMD")
    except RuntimeError as exc:
        nk = form.kkt_dim
        block = K[:nk, :nk].toarray()
        cond = np.linalg.cond(block)
        raise ValueError(
            f"singular KKT system (dimension {nk}, condition number of the first "
            f"device block {cond:.3g}); check that every local variable is "
            f"constrained or has positive curvature"
        ) from exc
    B, m = form.batch, form.num_rows
    if warm is not None and warm.beta.shape == (B, m):
        beta, lam = warm.beta.copy(), warm.lam.copy()
    else:
        beta, lam = np.zeros((B, m)), np.zeros((B, m))
    return QpProxWorkspace(form, float(rho_p), float(rho_theta), float(omega), lu, beta, lam)


def qp_prox(
    ws: QpProxWorkspace,
    x: np.ndarray,
    y: np.ndarray,
    iters: int = 10,
    tol: float | None = None,
    record: bool = False,
    relax: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Approximate ``prox_{f, rho_p, rho_theta}(x, y)`` for every device.

    ``x`` and ``y`` are ``(B, tau*T)``. Runs ``iters`` inner iterations, or
    stops earlier once the inner primal and dual residuals drop below ``tol``
    when it is given. Inner iterates persist in ``ws`` and warm-start the next
    call.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not 0.0 < relax < 2.0:
        raise ValueError("relax must lie in (0, 2)")
    f = ws.form
    B, nx, m = f.batch, f.num_primal, f.num_rows
    tT = f.tau * f.horizon
    x = np.asarray(x, dtype=float).reshape(B, tT)
    y = np.asarray(y, dtype=float).reshape(B, tT)
    top = np.concatenate([ws.rho_p * x, ws.rho_theta * y, -f.q], axis=1)
    eq = f.eq_mask[None, :]
    beta, lam = ws.beta, ws.lam
    inv_omega = 1.0 / ws.omega
    for _ in range(iters):
        w = beta - lam
        rhs = np.concatenate([top, f.rhs + w], axis=1)
        sol = ws.lu.solve(rhs.ravel()).reshape(B, nx + m)
        alpha = np.where(eq, 0.0, w + sol[:, nx:] * inv_omega)
        if relax != 1.0:
            alpha = relax * alpha + (1.0 - relax) * beta
        beta_new = np.where(eq, 0.0, np.minimum(alpha + lam, 0.0))
        lam = lam + alpha - beta_new
        r_pri = np.abs(alpha - beta_new).max(initial=0.0)
        r_dual = ws.omega * np.abs(beta_new - beta).max(initial=0.0)
        beta = beta_new
        if record:
            ws.history.append((r_pri, r_dual))
        if tol is not None and max(r_pri, r_dual) <= tol:
            break
    ws.beta, ws.lam, ws.alpha = beta, lam, alpha
    ws.primal = sol[:, :nx]
    return sol[:, :tT].copy(), sol[:, tT : 2 * tT].copy()
