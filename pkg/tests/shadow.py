"""Unsimplified, terminal-level ADMM used as an independent reference.

Duplicates ``z, xi`` and scaled prices ``u, v`` live on every terminal and
every contingency; the projections onto balance and consistency use the
dense averaging matrix. Only the device proxes are shared with the package.
"""

from __future__ import annotations

import numpy as np

from mpopf.devices import ProxEngine

from conftest import dense_average_matrix, flatten


def unflatten(net, X: np.ndarray) -> list:
    """Inverse of ``flatten`` for one slice: ``(J, T)`` to per-group ``(1, n, tau, T)``."""
    out, start = [], 0
    for g in net.groups:
        size = g.count * g.terminals_per_device
        out.append(X[start:start + size].reshape(1, g.count, g.terminals_per_device, net.horizon))
        start += size
    return out


class ShadowAdmm:
    def __init__(self, net, rho_p=1.0, rho_theta=1.0, alpha=1.0):
        self.net = net
        self.K1 = net.num_contingencies + 1
        self.A = dense_average_matrix(net)
        self.R = np.eye(self.A.shape[0]) - self.A
        J, T = self.A.shape[0], net.horizon
        self.z = np.zeros((self.K1, J, T))
        self.xi = np.zeros((self.K1, J, T))
        self.u = np.zeros((self.K1, J, T))
        self.v = np.zeros((self.K1, J, T))
        self.rho_p, self.rho_theta, self.alpha = rho_p, rho_theta, alpha
        self.engine = ProxEngine(net)
        self.p = self.theta = None

    def _stack(self, X):
        per_k = [unflatten(self.net, X[k]) for k in range(self.K1)]
        return [np.concatenate([pk[g] for pk in per_k]) for g in range(len(self.net.groups))]

    def step(self):
        net, K1 = self.net, self.K1
        rp, rt = K1 * self.rho_p, K1 * self.rho_theta
        tx = self._stack(self.z - self.u)
        ty = self._stack(self.xi - self.v)
        p, th = [], []
        for g in range(len(net.groups)):
            a, b = tx[g], ty[g]
            if net.k_eff(g) == 1:
                a, b = a.mean(axis=0, keepdims=True), b.mean(axis=0, keepdims=True)
            pg, tg = self.engine.prox(g, a, b, rp, rt)
            p.append(pg)
            th.append(tg)
        P = np.stack([flatten(p, k) for k in range(K1)])
        TH = np.stack([flatten(th, k) for k in range(K1)])
        a = self.alpha
        Ph = a * P + (1 - a) * self.z
        THh = a * TH + (1 - a) * self.xi
        self.z = np.einsum("ij,kjt->kit", self.R, Ph + self.u)
        self.xi = np.einsum("ij,kjt->kit", self.A, THh + self.v)
        self.u = self.u + Ph - self.z
        self.v = self.v + THh - self.xi
        self.p, self.theta = p, th

    def u_tilde(self) -> float:
        return float(np.abs(np.einsum("ij,kjt->kit", self.R, self.u)).max())

    def v_bar(self) -> float:
        return float(np.abs(np.einsum("ij,kjt->kit", self.A, self.v)).max())
