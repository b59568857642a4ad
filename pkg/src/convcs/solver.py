"""Alternating analysis-sparsity reconstruction.

Minimises::

    ||y - Phi x||^2 + eta * sum_k (||w_k * x - alpha_k||^2 + J(alpha_k))

by alternating a closed-form code update (soft threshold or positive part)
with one gradient step on ``x``.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import sensing, tensor

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class InfeasibleCodesError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    eta: float = 0.1
    delta: float = 1.0
    tau: float = 0.01
    regularizer: str = "l1"  # or "nonneg"
    max_iters: int = 400
    rel_tol: float = 1e-6
    step_mode: str = "backtracking"  # or "fixed"

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.regularizer not in ("l1", "nonneg"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.step_mode not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step mode {self.step_mode!r}")


def simplified_coefficients(delta, eta):
    """(rho, delta, gamma) of the simplified x-recursion."""
    return 1.0 - delta * (1.0 + eta), delta, delta * eta


def dct_basis(n):
    """Orthonormal 1-D DCT-II basis, rows are basis vectors."""
    u = np.arange(n)[:, None]
    a = np.arange(n)[None, :]
    B = np.cos(np.pi * (2 * a + 1) * u / (2 * n))
    B[0] *= math.sqrt(1.0 / n)
    B[1:] *= math.sqrt(2.0 / n)
    return B


@dataclass(frozen=True)
class AnalysisFilterBank:
    """K analysis filters applied with stride 1 and periodic boundaries.

    ``c`` is the tight-frame constant: ``sum_k W_k^T W_k = c I``.
    """

    filters: np.ndarray  # (K, n, n)
    c: float
    # per-filter multiplier on the threshold; 0 leaves that band unpenalised
    weights: np.ndarray = None

    @property
    def K(self):
        return self.filters.shape[0]

    @property
    def n(self):
        return self.filters.shape[1]

    def thresholds(self, tau):
        """Per-band thresholds broadcastable against coefficient maps."""
        if self.weights is None:
            return tau
        return tau * self.weights[:, None, None]

    def analysis(self, x):
        """Coefficient maps ``w_k * x`` of a ``(1, H, W)`` image: ``(K, H, W)``."""
        n = self.n
        xp = np.pad(np.asarray(x), [(0, 0), (0, n - 1), (0, n - 1)], mode="wrap")
        return tensor.conv2d_valid(xp, self.filters[:, None], 1)

    def synthesis(self, alpha):
        """``sum_k W_k^T alpha_k``, the adjoint of :meth:`analysis`."""
        K, H, W = alpha.shape
        n = self.n
        full = tensor.conv2d_transposed(alpha, self.filters[:, None], 1, (H + n - 1, W + n - 1))
        # fold the wrapped border back
        full[:, :n - 1, :] += full[:, H:, :]
        full = full[:, :H, :]
        full[:, :, :n - 1] += full[:, :, W:]
        return np.ascontiguousarray(full[:, :, :W])


def dct_analysis_bank(n=8, penalize_dc=False):
    """All n^2 separable DCT-II filters, normalised so that c = 1.

    The DC band (filter 0) is left unthresholded unless ``penalize_dc``.
    """
    B = dct_basis(n)
    filters = np.einsum("ua,vb->uvab", B, B).reshape(n * n, n, n) / n
    weights = np.ones(n * n)
    if not penalize_dc:
        weights[0] = 0.0
    return AnalysisFilterBank(filters=filters, c=1.0, weights=weights)


def soft_threshold(v, tau):
    if np.any(np.asarray(tau) < 0):
        raise ValueError("tau must be non-negative")
    v = np.asarray(v)
    return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)


def update_alpha(x, bank, cfg):
    coeffs = bank.analysis(x)
    if cfg.regularizer == "l1":
        return soft_threshold(coeffs, bank.thresholds(cfg.tau))
    return np.maximum(coeffs, 0.0)


def _penalty(alpha, cfg, bank):
    if cfg.regularizer == "l1":
        return 2.0 * float(np.sum(bank.thresholds(cfg.tau) * np.abs(alpha)))
    if np.any(alpha < 0):
        raise InfeasibleCodesError("negative codes are infeasible under the non-negative regularizer")
    return 0.0


def _residual(x, y, sensing_bank):
    return sensing.sense(x, sensing_bank).maps - y.maps


def x_gradient(x, alpha, y, sensing_bank, analysis_bank, cfg):
    """Half-gradient of the x-subproblem (the bracket of the update)."""
    r = _residual(x, y, sensing_bank)
    data = tensor.conv2d_transposed(r, sensing_bank.kernels, sensing_bank.stride, x.shape[1:])
    reg = analysis_bank.synthesis(analysis_bank.analysis(x) - alpha)
    return data + cfg.eta * reg


def update_x(x, alpha, y, sensing_bank, analysis_bank, cfg, delta=None):
    """One gradient step ``x - delta * (Phi^T(Phi x - y) + eta sum_k W_k^T(W_k x - alpha_k))``."""
    delta = cfg.delta if delta is None else delta
    return x - delta * x_gradient(x, alpha, y, sensing_bank, analysis_bank, cfg)


def update_x_simplified(x_t, x_half, x0, cfg):
    rho, delta, gamma = simplified_coefficients(cfg.delta, cfg.eta)
    return rho * x_t + delta * x0 + gamma * x_half


def subproblem_value(x, alpha, y, sensing_bank, analysis_bank, cfg):
    r = _residual(x, y, sensing_bank)
    d = analysis_bank.analysis(x) - alpha
    return float(np.sum(r * r) + cfg.eta * np.sum(d * d))


def objective(x, alpha, y, sensing_bank, analysis_bank, cfg):
    value = subproblem_value(x, alpha, y, sensing_bank, analysis_bank, cfg)
    return value + cfg.eta * _penalty(alpha, cfg, analysis_bank)


def _dot(a, b):
    return float(np.dot(a.ravel(), b.ravel()))


def backtrack(f0, quad, cfg):
    """Largest ``delta = cfg.delta / 2**j`` with ``quad(delta) <= f0``.

    ``quad(delta)`` evaluates the x-subproblem along the step, so the
    accepted step never increases it.  Returns 0 if no step qualifies.
    """
    delta = cfg.delta
    for _ in range(60):
        if quad(delta) <= f0:
            return delta
        delta *= 0.5
    return 0.0


def reconstruct_iterative(y, sensing_bank, analysis_bank=None, cfg=None, trace_path=None):
    """Alternate code and image updates starting from the scaled back-projection.

    Returns ``(x, trace)`` where ``x`` has the padded measurement geometry and
    ``trace`` lists ``(iteration, objective, relative_change)``.

    Phi x and the analysis coefficients of x are carried along and updated
    linearly, so one iteration costs one forward and one adjoint application
    of each operator.
    """
    analysis_bank = analysis_bank or dct_analysis_bank()
    cfg = cfg or SolverConfig()
    sensing.check_meta(y.meta, sensing_bank)
    if not np.any(y.maps):
        return np.zeros((1, y.meta.H, y.meta.W)), []
    y = sensing.MeasurementSet(maps=y.maps.astype(np.float64), meta=y.meta)
    sensing_bank = sensing_bank.astype(np.float64)
    kernels, stride, shape = sensing_bank.kernels, sensing_bank.stride, (y.meta.H, y.meta.W)
    x = sensing.initial_estimate(y, sensing_bank)
    thresholds = analysis_bank.thresholds(cfg.tau)
    band_tau = np.broadcast_to(np.asarray(thresholds, dtype=np.float64).reshape(-1), (analysis_bank.K,))
    trace = []
    px = wx = None
    for t in range(cfg.max_iters):
        if t % 50 == 0:  # refresh to stop rounding drift
            px = tensor.conv2d_valid(x, kernels, stride)
            wx = analysis_bank.analysis(x)
        if cfg.regularizer == "l1":
            alpha = wx - np.clip(wx, -thresholds, thresholds)
            penalty = 2.0 * float(band_tau @ np.abs(alpha).sum(axis=(1, 2)))
        else:
            alpha = np.maximum(wx, 0.0)
            penalty = 0.0
        r = px - y.maps
        d = wx - alpha
        g = tensor.conv2d_transposed(r, kernels, stride, shape) + cfg.eta * analysis_bank.synthesis(d)
        pg = tensor.conv2d_valid(g, kernels, stride)
        wg = analysis_bank.analysis(g)
        # the x-subproblem is an exact quadratic along -g
        c0 = _dot(r, r) + cfg.eta * _dot(d, d)
        c1 = _dot(r, pg) + cfg.eta * _dot(d, wg)
        c2 = _dot(pg, pg) + cfg.eta * _dot(wg, wg)

        def quad(step):
            return c0 - 2.0 * step * c1 + step * step * c2

        if cfg.step_mode == "fixed":
            delta = cfg.delta
        else:
            delta = backtrack(c0, quad, cfg)
        x_new = x - delta * g
        if not np.all(np.isfinite(x_new)):
            raise SolverError(f"non-finite iterate at iteration {t + 1}")
        px = px - delta * pg
        wx = wx - delta * wg
        change = float(delta * np.linalg.norm(g) / max(np.linalg.norm(x), np.finfo(float).tiny))
        x = x_new
        trace.append((t + 1, quad(delta) + cfg.eta * penalty, change))
        if change < cfg.rel_tol:
            break
    else:
        if cfg.max_iters:
            log.info("stopped after %d iterations, last change %.3g", cfg.max_iters, trace[-1][2])
    if trace_path is not None:
        write_trace(trace_path, trace)
    return x, trace


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write("iteration objective relative_change\n")
        for it, obj, change in trace:
            fh.write(f"{it} {obj:.17g} {change:.17g}\n")
