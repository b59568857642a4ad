"""Dataset preparation, training loop and PSNR evaluation sweeps."""

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import imageio, network, sensing, solver, tensor

log = logging.getLogger(__name__)

PSNR_INF = float("inf")


class TrainingDiverged(RuntimeError):
    pass


# -- synthetic data -----------------------------------------------------------


def piecewise_constant(rng, size=64, shapes=3):
    """Background plus a few axis-aligned rectangles of random grey levels."""
    x = np.full((size, size), rng.uniform(0.2, 0.8))
    for _ in range(shapes):
        h, w = rng.integers(size // 6, size // 2, endpoint=True, size=2)
        r, c = rng.integers(0, size - h), rng.integers(0, size - w)
        x[r:r + h, c:c + w] = rng.uniform(0.0, 1.0)
    return x[None]


def smooth_scene(rng, size=64):
    """Rectangles and discs over a smooth gradient; a rough stand-in for photos."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    x = 0.5 + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0, 1, size=2)
        rad = rng.uniform(0.08, 0.3)
        level = rng.uniform(0.0, 1.0)
        if rng.random() < 0.5:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        else:
            mask = (abs(yy - cy) < rad) & (abs(xx - cx) < rad * rng.uniform(0.5, 1.5))
        x[mask] = level
    return np.clip(x, 0.0, 1.0)[None]


def write_synthetic_images(directory, count, size=64, seed=0, kind="scene"):
    """Write ``count`` synthetic PGM images; returns their paths."""
    os.makedirs(directory, exist_ok=True)
    rng = np.random.default_rng(seed)
    make = smooth_scene if kind == "scene" else piecewise_constant
    paths = []
    for i in range(count):
        path = os.path.join(directory, f"{kind}_{i:04d}.pgm")
        imageio.write_pgm(path, make(rng, size))
        paths.append(path)
    return paths


# -- augmentation and dataset ---------------------------------------------------


def dihedral_variants(patch, flips=True, rotations=True):
    """Distinct flip/rotation variants of a ``(..., H, W)`` patch (8 with both flags)."""
    transforms = [lambda a: a]
    if rotations:
        transforms = [lambda a, k=k: np.rot90(a, k, axes=(-2, -1)) for k in range(4)]
    if flips:
        if rotations:
            transforms += [lambda a, t=t: t(np.flip(a, axis=-1)) for t in transforms]
        else:
            transforms = [
                lambda a: a,
                lambda a: np.flip(a, axis=-1),
                lambda a: np.flip(a, axis=-2),
                lambda a: np.flip(a, axis=(-2, -1)),
            ]
    return [np.ascontiguousarray(t(patch)) for t in transforms]


@dataclass
class PatchDataset:
    source: str
    patch_size: int = 160
    flips: bool = True
    rotations: bool = True
    seed: int = 0
    heldout_fraction: float = 0.1
    train_files: list = field(init=False)
    heldout_files: list = field(init=False)

    def __post_init__(self):
        files = sorted(
            os.path.join(self.source, f) for f in os.listdir(self.source)
            if f.lower().endswith((".pgm", ".png"))
        )
        if not files:
            raise FileNotFoundError(f"no PGM/PNG images in {self.source}")
        order = np.random.default_rng(self.seed).permutation(len(files))
        n_held = int(math.ceil(self.heldout_fraction * len(files))) if self.heldout_fraction > 0 else 0
        if n_held >= len(files):
            raise ValueError("held-out split leaves no training images")
        # split by source image so no held-out content reaches training
        self.heldout_files = [files[i] for i in sorted(order[:n_held])]
        self.train_files = [files[i] for i in sorted(order[n_held:])]

    @property
    def variants_per_patch(self):
        return len(dihedral_variants(np.zeros((2, 2)), self.flips, self.rotations))

    def training_patches(self, count):
        """``count`` augmented patches, ``(count, 1, P, P)`` float32."""
        rng = np.random.default_rng(self.seed + 1)
        images = [imageio.read_image(f) for f in self.train_files]
        P = self.patch_size
        out = []
        while len(out) < count:
            img = images[rng.integers(len(images))]
            H, W = img.shape[1:]
            if H < P or W < P:
                raise ValueError(f"image of size {H}x{W} smaller than patch size {P}")
            r, c = rng.integers(0, H - P + 1), rng.integers(0, W - P + 1)
            out.extend(dihedral_variants(img[:, r:r + P, c:c + P], self.flips, self.rotations))
        return np.stack(out[:count]).astype(np.float32)

    def heldout_images(self):
        return [(os.path.basename(f), imageio.read_image(f)) for f in self.heldout_files]


# -- loss, schedule, training ---------------------------------------------------


def l2_loss(out, target):
    """Batch mean of squared reconstruction error, ``(1/B) sum_i ||f_i - x_i||^2``."""
    out, target = np.asarray(out), np.asarray(target)
    if out.shape != target.shape:
        raise ValueError(f"shape mismatch {out.shape} vs {target.shape}")
    diff = out.astype(np.float64) - target
    return float(np.sum(diff * diff) / out.shape[0])


def l2_loss_grad(out, target):
    return 2.0 * (out - target) / out.shape[0]


def learning_rate(update, lr0, halve_every):
    return lr0 * 2.0 ** -(update // halve_every)


@dataclass(frozen=True)
class TrainConfig:
    minibatch: int = 64
    lr0: float = 1e-4
    halve_every: int = 200_000
    max_updates: int = 1000
    eval_every: int = 100
    seed: int = 0
    train_sensing: bool = True

    def __post_init__(self):
        if min(self.minibatch, self.halve_every, self.max_updates, self.eval_every) < 1:
            raise ValueError("minibatch, halve_every, max_updates and eval_every must be positive")
        if self.lr0 < 0:
            raise ValueError("lr0 must be non-negative")


def train(patches, net_cfg, train_cfg, out_dir=None, params=None):
    """Minibatch ADAM on the l2 loss; returns ``(params, trace)``.

    ``trace`` holds ``(update, loss, lr)`` per step.  If ``out_dir`` is set,
    ``loss.txt`` is appended every step and ``checkpoint.ccsn`` is rewritten
    every ``eval_every`` updates.
    """
    patches = np.asarray(patches, dtype=np.float32)
    params = params or network.init_params(net_cfg)
    state = network.AdamState.zeros_like(params)
    rng = np.random.default_rng(train_cfg.seed)
    xp, pads = sensing.pad_for_bank(patches, net_cfg.L, net_cfg.s)
    n = len(patches)
    batch = min(train_cfg.minibatch, n)
    frozen = () if train_cfg.train_sensing else ("sensing",)
    trace_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        trace_fh = open(os.path.join(out_dir, "loss.txt"), "w")
        trace_fh.write("update,loss,lr\n")
    trace = []
    try:
        for u in range(train_cfg.max_updates):
            idx = np.sort(rng.choice(n, size=batch, replace=False))
            lr = learning_rate(u, train_cfg.lr0, train_cfg.halve_every)
            net = network.ConvCSNet(net_cfg, params)
            out = tensor.crop(net.forward_images(xp[idx]), pads)
            target = patches[idx]
            loss = l2_loss(out, target)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at update {u} (lr={lr:g}); last good checkpoint kept"
                )
            g = np.zeros(xp[idx].shape, dtype=np.float32)
            top, bottom, left, right = pads
            g[..., top:g.shape[-2] - bottom, left:g.shape[-1] - right] = l2_loss_grad(out, target)
            grads = net.backward(g)
            params, state = network.adam_step(params, grads, state, lr, frozen=frozen)
            trace.append((u, loss, lr))
            if trace_fh:
                trace_fh.write(f"{u},{loss:.9g},{lr:.9g}\n")
            if out_dir is not None and (u + 1) % train_cfg.eval_every == 0:
                _atomic_checkpoint(os.path.join(out_dir, "checkpoint.ccsn"), net_cfg, params)
    finally:
        if trace_fh:
            trace_fh.close()
    if out_dir is not None:
        _atomic_checkpoint(os.path.join(out_dir, "checkpoint.ccsn"), net_cfg, params)
    return params, trace


def _atomic_checkpoint(path, cfg, params):
    tmp = f"{path}.tmp"
    network.save_checkpoint(tmp, cfg, params)
    os.replace(tmp, path)


def smoothed(values, window):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


# -- evaluation -----------------------------------------------------------------


def psnr(reference, estimate):
    """PSNR in dB with peak 1; identical inputs give ``inf``."""
    reference, estimate = np.asarray(reference, np.float64), np.asarray(estimate, np.float64)
    if reference.shape != estimate.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {estimate.shape}")
    mse = float(np.mean((reference - estimate) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(1.0 / mse)


def net_measure(x, net_cfg, params, sigma255=0.0, seed=0):
    """Sense ``x`` with the network's own (possibly learned) filters."""
    filters = params["sensing"][:, 0].astype(np.float64)
    bank = sensing.FilterBank(filters=filters, stride=net_cfg.s, seed=net_cfg.sensing_seed)
    y = sensing.sense_image(x, bank)
    if sigma255:
        y = sensing.add_noise(y, sigma255, seed)
    return y


def reconstruct_net(y, net_cfg, params):
    return network.forward(y, params, net_cfg).astype(np.float64)


@dataclass
class EvalRow:
    method: str
    rate_nominal: float
    rate_achieved: float
    noise_sigma255: float
    image: str
    psnr_db: float
    seconds: float
    preset: str = ""


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def averages(self):
        """Mean PSNR per (method, preset, noise)."""
        groups = {}
        for r in self.rows:
            groups.setdefault((r.method, r.preset, r.noise_sigma255), []).append(r.psnr_db)
        return {k: float(np.mean(v)) for k, v in groups.items()}

    def write_csv(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "rate_nominal", "rate_achieved", "noise_sigma255", "image", "psnr_db", "seconds"])
            for r in self.rows:
                w.writerow([r.method, f"{r.rate_nominal:g}", f"{r.rate_achieved:.6f}", f"{r.noise_sigma255:g}",
                            r.image, f"{r.psnr_db:.4f}", f"{r.seconds:.4f}"])
        os.replace(tmp, path)

    def table(self):
        lines = [f"{'method':<10} {'preset':<20} {'rate':>7} {'noise':>6} {'image':<24} {'PSNR':>8}"]
        for r in self.rows:
            lines.append(f"{r.method:<10} {r.preset:<20} {r.rate_achieved:7.4f} {r.noise_sigma255:6g} "
                         f"{r.image:<24} {r.psnr_db:8.2f}")
        for e in self.errors:
            lines.append(f"error: {e}")
        return "\n".join(lines)


def evaluate(images, methods, presets, noises=(0.0,), seeds=(0,), checkpoints=None, solver_cfg=None):
    """Sweep methods x presets x noise levels x images.

    ``images`` is a list of ``(name, (1, H, W) array)``; ``methods`` holds
    ``"iterative"``, ``"adjoint"`` and/or ``"net"``; ``checkpoints`` maps a
    preset name to a ``.ccsn`` path for the net method.  PSNR is averaged
    over ``seeds`` (filter bank and noise seeds) and computed on outputs
    clamped to [0, 1].
    """
    report = EvalReport()
    checkpoints = checkpoints or {}
    analysis_bank = solver.dct_analysis_bank()
    for method in methods:
        for preset in presets:
            net = None
            if method == "net":
                path = checkpoints.get(preset)
                if path is None:
                    report.errors.append(f"net/{preset}: no checkpoint configured")
                    continue
                if not os.path.exists(path):
                    report.errors.append(f"net/{preset}: missing checkpoint {path}")
                    continue
                net = network.load_checkpoint(path)
                L, m, s = sensing.PRESETS[preset]
                if (net[0].L, net[0].m, net[0].s) != (L, m, s):
                    report.errors.append(f"net/{preset}: checkpoint is for {network.describe(net[0])}")
                    continue
            for sigma in noises:
                for name, x in images:
                    scores, secs, rate = [], [], None
                    for seed in seeds:
                        t0 = time.perf_counter()
                        if net is not None:
                            y = net_measure(x, *net, sigma255=sigma, seed=seed + 1)
                            est = reconstruct_net(y, *net)
                        else:
                            bank = sensing.preset_bank(preset, seed)
                            y = sensing.sense_image(x, bank)
                            if sigma:
                                y = sensing.add_noise(y, sigma, seed + 1)
                            if method == "iterative":
                                est, _ = solver.reconstruct_iterative(y, bank, analysis_bank, solver_cfg)
                            elif method == "adjoint":
                                est = sensing.initial_estimate(y, bank)
                            else:
                                raise ValueError(f"unknown method {method!r}")
                        secs.append(time.perf_counter() - t0)
                        est = np.clip(tensor.crop(est, y.meta.pads), 0.0, 1.0)
                        scores.append(psnr(x, est))
                        rate = y.meta.achieved_rate
                    report.rows.append(EvalRow(
                        method=method, rate_nominal=sensing.NOMINAL_RATES[preset], rate_achieved=rate,
                        noise_sigma255=float(sigma), image=name, psnr_db=float(np.mean(scores)),
                        seconds=float(np.mean(secs)), preset=preset,
                    ))
    return report
