"""Run manifests: ``key = value`` text files that fully describe a run.

Unknown keys are errors.  The run directory is named after a hash of the
parsed, normalised manifest, so identical manifests map to the same
directory regardless of key order, spacing or comments.
"""

import hashlib
import os
from dataclasses import dataclass

from . import sensing


class ManifestError(ValueError):
    pass


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(kind):
    def parse(text):
        return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
    return parse


# key -> (parser, default); None means required or derived
TRAIN = {
    "output_dir": (str, "runs"),
    "preset": (str, None),
    "m": (int, None),
    "L": (int, None),
    "s": (int, None),
    "sensing_seed": (int, 0),
    "data": (str, None),
    "synthetic_images": (int, 0),
    "synthetic_size": (int, 64),
    "patch_size": (int, 32),
    "patches": (int, 500),
    "flips": (_bool, True),
    "rotations": (_bool, True),
    "heldout_fraction": (float, 0.1),
    "split_seed": (int, 0),
    "minibatch": (int, 4),
    "lr0": (float, 1e-4),
    "halve_every": (int, 200_000),
    "max_updates": (int, 300),
    "eval_every": (int, 100),
    "seed": (int, 0),
    "train_sensing": (_bool, True),
    "stages": (int, 14),
    "depth": (int, 14),
    "width": (int, 96),
    "init_seed": (int, 0),
    "tap_mode": (str, "per_layer"),
    "fill_offset": (str, "center"),
}

EVAL = {
    "output_dir": (str, "runs"),
    "images": (str, None),
    "methods": (_list(str), ("iterative",)),
    "presets": (_list(str), None),
    "noise": (_list(float), (0.0,)),
    "seeds": (_list(int), (0,)),
    "eta": (float, 0.1),
    "tau": (float, 0.01),
    "delta": (float, 1.0),
    "max_iters": (int, 400),
    "rel_tol": (float, 1e-6),
    "regularizer": (str, "l1"),
    "step_mode": (str, "backtracking"),
}

SCHEMAS = {"train": TRAIN, "eval": EVAL}


@dataclass(frozen=True)
class Manifest:
    kind: str
    values: dict
    base_dir: str

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def path(self, key):
        """A path-valued entry, resolved relative to the manifest's directory."""
        value = self.values.get(key)
        if value is None:
            return None
        return value if os.path.isabs(value) else os.path.normpath(os.path.join(self.base_dir, value))

    def canonical(self):
        """Normalised text: one ``key = value`` per explicitly given key, sorted."""
        lines = [f"kind = {self.kind}"]
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    def run_dir(self):
        out = self.path("output_dir") or os.path.join(self.base_dir, "runs")
        return os.path.join(out, f"{self.kind}-{self.digest()[:16]}")

    def geometry(self):
        """``(L, m, s)`` from ``preset`` or explicit ``m``, ``L``, ``s``."""
        preset = self.values.get("preset")
        explicit = [self.values.get(k) for k in ("L", "m", "s")]
        if preset is not None:
            if any(v is not None for v in explicit):
                raise ManifestError("give either preset or m, L, s, not both")
            if preset not in sensing.PRESETS:
                raise ManifestError(f"unknown preset {preset!r}; choose from {', '.join(sensing.PRESETS)}")
            return sensing.PRESETS[preset]
        if any(v is None for v in explicit):
            raise ManifestError("need preset or all of m, L, s")
        return tuple(explicit)


def parse(text, kind, base_dir="."):
    if kind not in SCHEMAS:
        raise ManifestError(f"unknown manifest kind {kind!r}")
    schema = SCHEMAS[kind]
    given = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.startswith("checkpoint.") and kind == "eval":
            parser = str
        elif key in schema:
            parser = schema[key][0]
        else:
            raise ManifestError(f"line {lineno}: unknown key {key!r} for a {kind} manifest")
        if key in given:
            raise ManifestError(f"line {lineno}: duplicate key {key!r}")
        try:
            given[key] = parser(value)
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    return Manifest(kind=kind, values=given, base_dir=base_dir)


def load(path, kind):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    return parse(text, kind, base_dir=os.path.dirname(os.path.abspath(path)))


def setting(manifest, key):
    """Value of ``key``, falling back to the schema default."""
    if key in manifest.values:
        return manifest.values[key]
    return SCHEMAS[manifest.kind][key][1]
