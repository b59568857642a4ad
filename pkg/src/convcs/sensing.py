"""Convolutional compressive sensing operator.

An image is measured by ``m`` random L x L filters applied as a valid
cross-correlation with stride ``s``.  Everything needed to rebuild the
operator is kept in a small metadata record (filters are regenerated from
their seed, never stored).
"""

from dataclasses import dataclass, replace

import numpy as np

from . import tensor

#: Named sensing configurations, ``name -> (L, m, s)``.
PRESETS = {
    "rate0.05": (17, 8, 8),
    "rate0.1": (17, 6, 8),
    "rate0.2": (11, 5, 5),
    "rate0.3": (11, 8, 5),
    "rate0.05-corrected": (17, 3, 8),
}

NOMINAL_RATES = {
    "rate0.05": 0.05,
    "rate0.1": 0.1,
    "rate0.2": 0.2,
    "rate0.3": 0.3,
    "rate0.05-corrected": 0.05,
}

DENSE_CAP = 4096


class ParameterError(ValueError):
    pass


class MetaMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class FilterBank:
    filters: np.ndarray  # (m, L, L)
    stride: int
    seed: int
    rate_label: float = float("nan")

    @property
    def m(self):
        return self.filters.shape[0]

    @property
    def L(self):
        return self.filters.shape[1]

    @property
    def kernels(self):
        """Filters as conv kernels, ``(m, 1, L, L)``."""
        return self.filters[:, None]

    def astype(self, dtype):
        return replace(self, filters=self.filters.astype(dtype))


@dataclass(frozen=True)
class SenseMeta:
    H: int
    W: int
    L: int
    m: int
    s: int
    seed: int
    noise_sigma255: float = 0.0
    precision: int = 64
    pads: tuple = (0, 0, 0, 0)  # reflect padding applied before sensing

    @property
    def grid(self):
        return (self.H - self.L) // self.s + 1, (self.W - self.L) // self.s + 1

    @property
    def num_measurements(self):
        gh, gw = self.grid
        return self.m * gh * gw

    @property
    def achieved_rate(self):
        return self.num_measurements / (self.H * self.W)

    @property
    def original_shape(self):
        top, bottom, left, right = self.pads
        return self.H - top - bottom, self.W - left - right


@dataclass(frozen=True)
class MeasurementSet:
    maps: np.ndarray  # (m, M0h, M0w)
    meta: SenseMeta

    @property
    def vector(self):
        return self.maps.reshape(-1)


def make_filter_bank(m, L, s, seed, rate_label=float("nan"), dtype=np.float64):
    """Draw ``m`` i.i.d. Gaussian L x L filters with standard deviation 1/L.

    The scale gives every filter (and therefore every row of the sensing
    matrix) an expected squared norm of one.
    """
    for name, val in (("m", m), ("L", L), ("s", s)):
        if int(val) != val or val < 1:
            raise ParameterError(f"{name} must be a positive integer, got {val}")
    if s > L:
        raise ParameterError(f"stride {s} exceeds filter size {L}; windows would leave gaps")
    rng = np.random.default_rng(seed)
    filters = rng.normal(0.0, 1.0 / L, size=(m, L, L)).astype(dtype)
    return FilterBank(filters=filters, stride=int(s), seed=int(seed), rate_label=rate_label)


def preset_bank(name, seed, dtype=np.float64):
    try:
        L, m, s = PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return make_filter_bank(m, L, s, seed, rate_label=NOMINAL_RATES[name], dtype=dtype)


def bank_from_meta(meta):
    return make_filter_bank(meta.m, meta.L, meta.s, meta.seed)


def valid_size(n, L, s):
    """Smallest size >= n for which a valid stride-s L-window grid fits exactly."""
    if n <= L:
        return L
    return L + -(-(n - L) // s) * s


def pad_for_bank(x, L, s):
    """Reflect-pad an image so its size fits the sensing grid.

    Returns the padded image and the ``(top, bottom, left, right)`` pads.
    """
    H, W = x.shape[-2:]
    target = (valid_size(H, L, s), valid_size(W, L, s))
    top, bottom = tensor.reflect_pad_amounts(H, target[0])
    left, right = tensor.reflect_pad_amounts(W, target[1])
    pads = (top, bottom, left, right)
    if pads == (0, 0, 0, 0):
        return np.array(x, copy=True), pads
    return tensor.pad_reflect(x, pads=pads), pads


def _image3(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None]
    if x.ndim == 3 and x.shape[0] == 1:
        return x
    raise tensor.DimensionError(f"expected a single-channel image, got shape {x.shape}")


def sense(x, bank, pads=(0, 0, 0, 0)):
    """Measure an image whose size already fits the bank's grid."""
    x = _image3(x)
    maps = tensor.conv2d_valid(x, bank.kernels.astype(x.dtype, copy=False), bank.stride)
    meta = SenseMeta(
        H=x.shape[1], W=x.shape[2], L=bank.L, m=bank.m, s=bank.stride, seed=bank.seed,
        precision=64 if x.dtype == np.float64 else 32, pads=tuple(pads),
    )
    return MeasurementSet(maps=maps, meta=meta)


def sense_image(x, bank):
    """Pad an arbitrary-size image as needed, then measure it."""
    x = _image3(x)
    xp, pads = pad_for_bank(x, bank.L, bank.stride)
    return sense(xp, bank, pads=pads)


def check_meta(meta, bank):
    if (meta.L, meta.m, meta.s, meta.seed) != (bank.L, bank.m, bank.stride, bank.seed):
        raise MetaMismatchError(
            f"measurement meta (L={meta.L}, m={meta.m}, s={meta.s}, seed={meta.seed}) does not "
            f"match bank (L={bank.L}, m={bank.m}, s={bank.stride}, seed={bank.seed})"
        )


def adjoint(y, bank):
    """Back-project measurements into image space (transpose of :func:`sense`)."""
    check_meta(y.meta, bank)
    if y.maps.shape != (y.meta.m, *y.meta.grid):
        raise MetaMismatchError(f"maps shape {y.maps.shape} inconsistent with meta {y.meta}")
    return tensor.conv2d_transposed(
        y.maps, bank.kernels.astype(y.maps.dtype, copy=False), bank.stride, (y.meta.H, y.meta.W)
    )


def operator_scale(bank, H, W):
    """Mean diagonal of Phi^T Phi, i.e. ``trace(Phi^T Phi) / N``.

    Used to normalise back-projections: for Gaussian filters Phi^T Phi is
    close to this multiple of the identity.
    """
    gh = (H - bank.L) // bank.stride + 1
    gw = (W - bank.L) // bank.stride + 1
    return float(gh * gw * np.sum(bank.filters.astype(np.float64) ** 2) / (H * W))


def initial_estimate(y, bank):
    """Scaled back-projection ``adjoint(y) / c0``."""
    c0 = operator_scale(bank, y.meta.H, y.meta.W)
    return adjoint(y, bank) / c0


def dense_matrix(bank, H, W, cap=DENSE_CAP):
    """Explicit M x N matrix of the sensing operator (small images only).

    Row ``(i, gy, gx)`` holds filter ``i`` placed at window ``(gy, gx)``;
    columns index pixels in row-major order.
    """
    N = H * W
    if N > cap:
        raise ParameterError(f"dense oracle limited to N <= {cap}, got {N}")
    L, s = bank.L, bank.stride
    gh, gw = tensor.output_size(H, L, s), tensor.output_size(W, L, s)
    A = np.zeros((bank.m, gh, gw, H, W))
    for i in range(bank.m):
        for gy in range(gh):
            for gx in range(gw):
                A[i, gy, gx, gy * s:gy * s + L, gx * s:gx * s + L] = bank.filters[i]
    return A.reshape(bank.m * gh * gw, N)


def extract_blocks(x, L, s):
    """All L x L blocks at step ``s``, vectorised: ``(num_blocks, L*L)``."""
    x = _image3(x)[0]
    H, W = x.shape
    gh, gw = tensor.output_size(H, L, s), tensor.output_size(W, L, s)
    blocks = np.empty((gh * gw, L * L), dtype=x.dtype)
    for gy in range(gh):
        for gx in range(gw):
            blocks[gy * gw + gx] = x[gy * s:gy * s + L, gx * s:gx * s + L].ravel()
    return blocks


def block_measure(x, bank):
    """Block-based view of the operator: blocks times the m x L^2 filter matrix.

    Returns measurement maps shaped like :func:`sense` output.
    """
    x = _image3(x)
    H, W = x.shape[1:]
    gh, gw = (H - bank.L) // bank.stride + 1, (W - bank.L) // bank.stride + 1
    B = extract_blocks(x, bank.L, bank.stride)
    F = bank.filters.reshape(bank.m, -1)
    return (F @ B.T).reshape(bank.m, gh, gw)


def add_noise(y, sigma255, seed):
    """Add i.i.d. Gaussian noise of std ``sigma255 / 255`` to every measurement."""
    if sigma255 < 0:
        raise ParameterError("noise sigma must be non-negative")
    meta = replace(y.meta, noise_sigma255=float(sigma255))
    if sigma255 == 0:
        return MeasurementSet(maps=y.maps.copy(), meta=meta)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma255 / 255.0, size=y.maps.shape)
    return MeasurementSet(maps=(y.maps + noise).astype(y.maps.dtype), meta=meta)
