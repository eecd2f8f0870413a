"""Small dense Levenberg-Marquardt core shared by the scan matcher, the
visual-inertial window, and the fusion graph.

Variables live on manifolds described by a retract (and optionally a
local-coordinates map for priors). Residual blocks return raw residuals;
whitening is a per-component sigma vector and robustness an optional
elementwise Huber threshold in whitened units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InsufficientConstraints


@dataclass
class LmOptions:
    lambda_init: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    lambda_max: float = 1e12
    max_iters: int = 30
    step_tol: float = 1e-8
    cost_tol: float = 1e-9


@dataclass
class _Variable:
    value: object
    dim: int
    retract: Callable
    local: Optional[Callable] = None
    fixed: bool = False


@dataclass
class _Block:
    keys: tuple
    fn: Callable  # values dict -> raw residual
    jac: Optional[Callable]  # values dict -> {key: raw jacobian}
    sigmas: np.ndarray
    huber: Optional[float]  # elementwise threshold, whitened units
    fd_step: float


@dataclass
class SolveResult:
    values: dict
    cost: float
    cost_trace: list
    converged: bool
    iterations: int
    hessian: np.ndarray  # whitened Gauss-Newton J^T J at the solution
    gradient: np.ndarray
    offsets: dict  # key -> (start, dim) for free variables


class Problem:
    def __init__(self):
        self._vars = {}
        self._blocks = []

    def add_variable(self, key, value, dim, retract, local=None, fixed=False):
        if key in self._vars:
            raise ValueError("duplicate variable %r" % (key,))
        self._vars[key] = _Variable(value, dim, retract, local, fixed)

    def set_value(self, key, value):
        self._vars[key].value = value

    def value(self, key):
        return self._vars[key].value

    def add_block(self, keys, fn, jac=None, sigmas=1.0, huber=None, fd_step=1e-6):
        keys = tuple(keys)
        for k in keys:
            if k not in self._vars:
                raise KeyError("block references unknown variable %r" % (k,))
        self._blocks.append(_Block(keys, fn, jac, np.atleast_1d(np.asarray(sigmas, dtype=float)), huber, fd_step))

    # -- assembly ----------------------------------------------------------

    def _offsets(self):
        offsets = {}
        pos = 0
        for key, v in self._vars.items():
            if v.fixed:
                continue
            offsets[key] = (pos, v.dim)
            pos += v.dim
        return offsets, pos

    def _values(self):
        return {k: v.value for k, v in self._vars.items()}

    def _numeric_jac(self, block, values):
        """Symmetric-difference Jacobians for blocks without analytic ones."""
        jacs = {}
        r0 = np.atleast_1d(block.fn(values))
        h = block.fd_step
        for key in block.keys:
            var = self._vars[key]
            if var.fixed:
                continue
            J = np.empty((r0.size, var.dim))
            for c in range(var.dim):
                delta = np.zeros(var.dim)
                delta[c] = h
                vplus = dict(values)
                vplus[key] = var.retract(values[key], delta)
                vminus = dict(values)
                vminus[key] = var.retract(values[key], -delta)
                J[:, c] = (np.atleast_1d(block.fn(vplus)) - np.atleast_1d(block.fn(vminus))) / (2 * h)
            jacs[key] = J
        return jacs

    def _block_cost(self, block, values):
        r = np.atleast_1d(block.fn(values)) / block.sigmas
        if block.huber is None:
            return float(r @ r)
        a = np.abs(r)
        d = block.huber
        quad = a <= d
        return float(np.sum(r[quad] ** 2) + np.sum(d * (2.0 * a[~quad] - d)))

    def cost(self, values=None):
        values = self._values() if values is None else values
        return sum(self._block_cost(b, values) for b in self._blocks)

    def _linearize(self, values, offsets, dim):
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        for block in self._blocks:
            r = np.atleast_1d(block.fn(values)) / block.sigmas
            jacs = block.jac(values) if block.jac is not None else self._numeric_jac(block, values)
            if block.huber is not None:
                a = np.abs(r)
                w = np.where(a <= block.huber, 1.0, block.huber / np.maximum(a, 1e-300))
                sw = np.sqrt(w)
                r = r * sw
            else:
                sw = None
            cols = []
            for key in block.keys:
                if key not in offsets:
                    continue
                J = np.asarray(jacs[key], dtype=float) / block.sigmas[:, None]
                if sw is not None:
                    J = J * sw[:, None]
                cols.append((offsets[key], J))
            for (o1, d1), J1 in cols:
                g[o1 : o1 + d1] += J1.T @ r
                for (o2, d2), J2 in cols:
                    H[o1 : o1 + d1, o2 : o2 + d2] += J1.T @ J2
        return H, g

    def set_value(self, key, value):
        if key not in self._vars:
            raise KeyError("unknown variable %r" % (key,))
        self._vars[key].value = value

    def normal_equations(self):
        """Whitened Gauss-Newton (H, g, offsets) at the current values."""
        offsets, dim = self._offsets()
        H, g = self._linearize(self._values(), offsets, dim)
        return H, g, offsets

    # -- solve -------------------------------------------------------------

    def solve(self, opts=LmOptions(), step_projector=None):
        """Levenberg-Marquardt with additive damping.

        ``step_projector``, when given, maps each candidate step vector to a
        (possibly) restricted one before retraction; used to freeze
        degenerate directions.
        """
        if not self._blocks:
            raise InsufficientConstraints("no residual blocks")
        offsets, dim = self._offsets()
        if dim == 0:
            raise InsufficientConstraints("no free variables")
        values = self._values()
        cost = self.cost(values)
        trace = [cost]
        lam = opts.lambda_init
        converged = False
        it = 0
        H = g = None
        while it < opts.max_iters:
            it += 1
            H, g = self._linearize(values, offsets, dim)
            try:
                step = np.linalg.solve(H + lam * np.eye(dim), -g)
            except np.linalg.LinAlgError:
                lam = max(lam * opts.lambda_up, 1e-10)
                continue
            if step_projector is not None:
                step = step_projector(step)
            if np.linalg.norm(step) < opts.step_tol:
                converged = True
                break
            candidate = dict(values)
            for key, (o, d) in offsets.items():
                var = self._vars[key]
                candidate[key] = var.retract(values[key], step[o : o + d])
            new_cost = self.cost(candidate)
            if new_cost < cost:
                accepted_drop = cost - new_cost
                values = candidate
                cost = new_cost
                trace.append(cost)
                lam = max(lam / opts.lambda_down, 1e-12)
                if accepted_drop < opts.cost_tol:
                    converged = True
                    break
            else:
                lam *= opts.lambda_up
                if lam > opts.lambda_max:
                    break
        for key, var in self._vars.items():
            var.value = values[key]
        H, g = self._linearize(values, offsets, dim)
        return SolveResult(
            values=values,
            cost=cost,
            cost_trace=trace,
            converged=converged,
            iterations=it,
            hessian=H,
            gradient=g,
            offsets=offsets,
        )


def schur_complement(H, g, elim):
    """Eliminate the index set ``elim`` from (H, g) by Schur complement.

    Returns (H_kept, g_kept, kept_index_array). Near-singular eliminated
    blocks are handled by eigenvalue clamping.
    """
    n = H.shape[0]
    elim = np.asarray(sorted(elim), dtype=int)
    keep = np.setdiff1d(np.arange(n), elim)
    Hee = H[np.ix_(elim, elim)]
    Hek = H[np.ix_(elim, keep)]
    Hkk = H[np.ix_(keep, keep)]
    ge = g[elim]
    gk = g[keep]
    w, V = np.linalg.eigh(0.5 * (Hee + Hee.T))
    w_inv = np.where(w > 1e-10 * max(w.max(), 1.0), 1.0 / np.maximum(w, 1e-300), 0.0)
    Hee_inv = (V * w_inv) @ V.T
    H_new = Hkk - Hek.T @ Hee_inv @ Hek
    g_new = gk - Hek.T @ Hee_inv @ ge
    return 0.5 * (H_new + H_new.T), g_new, keep


def sqrt_info_rows(H, g):
    """Factor the quadratic cost model d^T H d + 2 g^T d + const into
    residual rows r(d) = A d + b with A^T A = H and A^T b = g
    (rank-revealing; H must be PSD)."""
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    tol = 1e-12 * max(float(w.max()), 1.0)
    keep = w > tol
    A = (np.sqrt(w[keep])[:, None]) * V[:, keep].T
    # b solves A^T b = g in the span; out-of-span parts of g are dropped
    b = (V[:, keep].T @ g) / np.sqrt(w[keep])
    return A, b
