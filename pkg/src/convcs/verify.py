"""Numerical self-checks: operator oracles, adjoint identity, gradients, tight frame.

Each suite returns a :class:`SuiteResult`; ``ok`` is true iff every case
stayed within tolerance.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import network, sensing, solver, tensor, training


@dataclass
class SuiteResult:
    name: str
    tolerance: float
    max_error: float = 0.0
    cases: int = 0
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures

    def record(self, error, label):
        self.cases += 1
        self.max_error = max(self.max_error, float(error))
        if not error <= self.tolerance:
            self.failures.append(f"{label}: error {error:.3e} > {self.tolerance:g}")

    def summary(self):
        status = "PASS" if self.ok else "FAIL"
        return f"{self.name}: {status}  cases={self.cases}  max error={self.max_error:.3e}  tolerance={self.tolerance:g}"


def random_geometry(rng, max_pixels=sensing.DENSE_CAP):
    """Random (L, m, s, H, W) with valid strided geometry and H*W <= max_pixels."""
    while True:
        L = int(rng.integers(2, 12))
        s = int(rng.integers(1, L + 1))
        m = int(rng.integers(1, 9))
        gh, gw = rng.integers(1, 12, size=2)
        H, W = L + (gh - 1) * s, L + (gw - 1) * s
        if H * W <= max_pixels:
            return L, m, s, int(H), int(W)


def oracle_suite(configs=50, seed=0, tol=1e-12):
    """Dense-matrix operator against the convolutional forward map."""
    rng = np.random.default_rng(seed)
    result = SuiteResult("oracle", tol)
    for i in range(configs):
        L, m, s, H, W = random_geometry(rng)
        bank = sensing.make_filter_bank(m, L, s, seed=seed + i)
        x = rng.normal(size=(1, H, W))
        A = sensing.dense_matrix(bank, H, W)
        diff = A @ x.ravel() - sensing.sense(x, bank).vector
        result.record(np.linalg.norm(diff) / np.linalg.norm(x), f"config {i} (L={L} m={m} s={s} {H}x{W}, seed {seed + i})")
    return result


def adjoint_suite(configs=10, trials=100, seed=0, tol=1e-10):
    """Dot-product test ``<Phi x, y> = <x, Phi^T y>`` on random vectors."""
    rng = np.random.default_rng(seed)
    result = SuiteResult("adjoint", tol)
    presets = list(sensing.PRESETS)
    for i in range(configs):
        if i < len(presets):
            L, m, s = sensing.PRESETS[presets[i]]
            H = W = L + 4 * s
        else:
            L, m, s, H, W = random_geometry(rng, max_pixels=96 * 96)
        bank = sensing.make_filter_bank(m, L, s, seed=seed + i)
        meta = sensing.SenseMeta(H=H, W=W, L=L, m=m, s=s, seed=seed + i)
        worst = 0.0
        for _ in range(trials):
            x = rng.normal(size=(1, H, W))
            y = sensing.MeasurementSet(maps=rng.normal(size=(m, *meta.grid)), meta=meta)
            lhs = np.vdot(sensing.sense(x, bank).maps, y.maps)
            rhs = np.vdot(x, sensing.adjoint(y, bank))
            worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y.maps)))
        result.record(worst, f"config {i} (L={L} m={m} s={s} {H}x{W}, seed {seed + i})")
    return result


def block_suite(configs=50, seed=0):
    """Patch-matrix measurement against ``sense``, within a rigorous rounding bound.

    Both sides are length-L^2 dot products summed in different orders, so
    they may differ by at most ``2 * gamma_n * sum|phi||x|`` elementwise
    with ``gamma_n = n u / (1 - n u)``.
    """
    rng = np.random.default_rng(seed)
    result = SuiteResult("blocks", 1.0)
    u = np.finfo(np.float64).eps / 2
    for i in range(configs):
        L, m, s, H, W = random_geometry(rng, max_pixels=128 * 128)
        bank = sensing.make_filter_bank(m, L, s, seed=seed + i)
        x = rng.normal(size=(1, H, W))
        n = L * L
        gamma = n * u / (1 - n * u)
        bound = 2 * gamma * sensing.sense(np.abs(x), sensing.FilterBank(np.abs(bank.filters), s, 0)).maps
        diff = np.abs(sensing.block_measure(x, bank) - sensing.sense(x, bank).maps)
        # ratio to the bound; <= 1 means equal up to float64 rounding
        result.record(float(np.max(diff / np.maximum(bound, np.finfo(float).tiny))), f"config {i} (L={L} m={m} s={s}, seed {seed + i})")
    return result


def frame_suite(sizes=((16, 16), (24, 40), (64, 64)), seed=0, tol=1e-10):
    """Analysis then synthesis of the default bank returns ``c x``; also checks adjointness."""
    rng = np.random.default_rng(seed)
    bank = solver.dct_analysis_bank()
    result = SuiteResult("frame", tol)
    for H, W in sizes:
        x = rng.normal(size=(1, H, W))
        back = bank.synthesis(bank.analysis(x))
        result.record(np.linalg.norm(back - bank.c * x) / np.linalg.norm(x), f"tight frame {H}x{W}")
        a = rng.normal(size=(bank.K, H, W))
        lhs, rhs = np.vdot(bank.analysis(x), a), np.vdot(x, bank.synthesis(a))
        result.record(abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(a)), f"adjoint {H}x{W}")
    return result


def gradcheck_config(seed=0, preset="rate0.2", width=96, depth=14, stages=14):
    """Full-size network on a small instance; every layer kind and tap is exercised."""
    return network.NetConfig.from_preset(preset, width=width, depth=depth, stages=stages,
                                         init_seed=seed, sensing_seed=seed)


def _randomised_params(cfg, rng):
    """Float64 parameters with nonzero biases and generic stage scalars."""
    params = network.init_params(cfg, dtype=np.float64)
    for name, value in params.items():
        if name.endswith(".b") or name == "stage_scalars":
            params[name] = value + rng.normal(0.0, 0.1, size=value.shape)
    return params


def gradient_errors(cfg, seed=0, size=24, h=1e-7):
    """Central-difference check per parameter group, in float64.

    For each group a random unit direction ``v`` is drawn and
    ``(loss(p + h v) - loss(p - h v)) / 2h`` is compared with ``<grad, v>``.
    Directions nearly orthogonal to the analytic gradient are redrawn, since
    there the relative error measures rounding noise rather than the gradient.
    Returns an ordered mapping group -> relative error.
    """
    rng = np.random.default_rng(seed)
    params = _randomised_params(cfg, rng)
    x = rng.uniform(0.0, 1.0, size=(2, 1, size, size))
    xp, pads = sensing.pad_for_bank(x, cfg.L, cfg.s)

    def loss(p):
        out = network.ConvCSNet(cfg, p).forward_images(xp)
        return training.l2_loss(out, xp)

    net = network.ConvCSNet(cfg, params)
    out = net.forward_images(xp)
    grads = net.backward(training.l2_loss_grad(out, xp))
    errors = OrderedDict()
    for name, value in params.items():
        g = grads[name]
        for _ in range(20):
            v = rng.normal(size=value.shape)
            v /= np.linalg.norm(v)
            if abs(np.vdot(g, v)) >= 0.1 * np.linalg.norm(g) / np.sqrt(g.size):
                break
        scale = max(float(np.max(np.abs(value))), 1.0)
        step = h * scale
        plus, minus = OrderedDict(params), OrderedDict(params)
        plus[name] = value + step * v
        minus[name] = value - step * v
        numeric = (loss(plus) - loss(minus)) / (2 * step)
        analytic = float(np.vdot(g, v))
        denom = max(abs(numeric), abs(analytic), 1e-8)
        errors[name] = abs(numeric - analytic) / denom
    return errors


def gradcheck_suite(seeds=(0, 1, 2, 3, 4), tol=1e-4, **cfg_kw):
    result = SuiteResult("gradcheck", tol)
    for seed in seeds:
        cfg = gradcheck_config(seed, **cfg_kw)
        for name, err in gradient_errors(cfg, seed).items():
            result.record(err, f"seed {seed} group {name}")
    return result


SUITES = OrderedDict(
    adjoint=adjoint_suite,
    oracle=oracle_suite,
    blocks=block_suite,
    gradcheck=gradcheck_suite,
    frame=frame_suite,
)


def run(name):
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    return SUITES[name]()
