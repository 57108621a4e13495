"""Synthetic infrared scenes, augmentation, PGM files and dataset manifests.

Every random draw goes through :class:`SplitMix64`, so a scene is a pure
function of its spec and seed.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


class DataError(ValueError):
    """Malformed spec, image file or manifest."""


class PgmError(DataError):
    pass


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """64-bit splitmix generator; vectorized draws advance the state by ``n``."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * _GOLDEN
            out = _mix(z)
        self.state = (self.state + n * int(_GOLDEN)) & _MASK64
        return out

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        # Box-Muller; u1 in (0, 1] keeps the log finite
        m = (n + 1) // 2
        u1 = ((self.next_u64(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
        u2 = (self.next_u64(m) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]

    def integers(self, n: int, high: int) -> np.ndarray:
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64)


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed for item ``index`` of a run seeded with ``seed``."""
    with np.errstate(over="ignore"):
        z = np.uint64(int(seed) & _MASK64) ^ (np.uint64(int(index) & _MASK64) * _GOLDEN)
        return int(_mix(np.array([z], dtype=np.uint64))[0])


# ----------------------------------------------------------------- scene specs

@dataclass
class Target:
    cx: float
    cy: float
    sigma: float
    amplitude: float


@dataclass
class Clutter:
    num_blobs: int = 0
    blob_sigma: tuple = (2.0, 6.0)
    blob_amplitude: tuple = (0.0, 0.1)


@dataclass
class SceneSpec:
    hw: int
    targets: list = field(default_factory=list)
    clutter: Clutter = field(default_factory=Clutter)
    background_level: float = 0.0
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        self.targets = [t if isinstance(t, Target) else Target(**t) for t in self.targets]
        if isinstance(self.clutter, dict):
            self.clutter = Clutter(**self.clutter)
        self.clutter.blob_sigma = tuple(self.clutter.blob_sigma)
        self.clutter.blob_amplitude = tuple(self.clutter.blob_amplitude)

    def validate(self) -> "SceneSpec":
        if self.hw < 1:
            raise DataError(f"hw must be positive, got {self.hw}")
        if not 0.0 <= self.background_level <= 1.0:
            raise DataError(f"background_level {self.background_level} outside [0, 1]")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be non-negative")
        for t in self.targets:
            if not (0 <= t.cx <= self.hw - 1 and 0 <= t.cy <= self.hw - 1):
                raise DataError(f"target centre ({t.cx}, {t.cy}) outside a {self.hw}x{self.hw} frame")
            if not 0.5 <= t.sigma <= 2.0:
                raise DataError(f"target sigma {t.sigma} outside [0.5, 2.0]")
            if not 0.0 <= t.amplitude <= 1.0:
                raise DataError(f"target amplitude {t.amplitude} outside [0, 1]")
        c = self.clutter
        if c.num_blobs < 0:
            raise DataError("clutter num_blobs must be non-negative")
        lo, hi = c.blob_sigma
        if not 0 < lo <= hi:
            raise DataError(f"bad clutter blob_sigma range {c.blob_sigma}")
        lo, hi = c.blob_amplitude
        if not 0 <= lo <= hi <= 1:
            raise DataError(f"bad clutter blob_amplitude range {c.blob_amplitude}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls(**json.loads(text))


def _gaussian(hw: int, cx: float, cy: float, sigma: float) -> np.ndarray:
    r = np.arange(hw, dtype=np.float64)
    gy = np.exp(-((r - cy) ** 2) / (2 * sigma * sigma))
    gx = np.exp(-((r - cx) ** 2) / (2 * sigma * sigma))
    return np.outer(gy, gx)


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(image, mask)``, both float32 of shape (1, 1, hw, hw)."""
    spec.validate()
    hw = spec.hw
    rng = SplitMix64(spec.rng_seed)
    img = np.full((hw, hw), spec.background_level, dtype=np.float64)
    c = spec.clutter
    if c.num_blobs:
        pos = rng.uniform(2 * c.num_blobs, 0.0, hw - 1).reshape(c.num_blobs, 2)
        sig = rng.uniform(c.num_blobs, *c.blob_sigma)
        amp = rng.uniform(c.num_blobs, *c.blob_amplitude)
        for (bx, by), s, a in zip(pos, sig, amp):
            img += a * _gaussian(hw, bx, by, s)
    mask = np.zeros((hw, hw), dtype=bool)
    for t in spec.targets:
        g = t.amplitude * _gaussian(hw, t.cx, t.cy, t.sigma)
        img += g
        if t.amplitude > 0:
            mask |= g >= 0.5 * t.amplitude
    img = np.clip(img, 0.0, 1.0).astype(np.float32)[None, None]
    if spec.noise_sigma > 0:
        img = add_gaussian_noise(img, spec.noise_sigma, derive_seed(spec.rng_seed, 1))
    return img, mask.astype(np.float32)[None, None]


def add_gaussian_noise(image, sigma_n: float, seed: int) -> np.ndarray:
    """i.i.d. N(0, (sigma_n/255)^2) per pixel, clamped to [0, 1]."""
    if sigma_n < 0:
        raise DataError(f"noise sigma must be non-negative, got {sigma_n}")
    img = np.asarray(getattr(image, "data", image), dtype=np.float32)
    if sigma_n == 0:
        return img.copy()
    noise = SplitMix64(seed).normal(img.size).reshape(img.shape) * (sigma_n / 255.0)
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


# ----------------------------------------------------------------- augmentation

class Transform(NamedTuple):
    hflip: bool
    vflip: bool
    rot: int  # quarter turns, counter-clockwise


def draw_transform(seed: int) -> Transform:
    u = SplitMix64(seed).uniform(3)
    return Transform(bool(u[0] < 0.5), bool(u[1] < 0.5), int(u[2] * 4) % 4)


def apply_transform(a: np.ndarray, tf: Transform) -> np.ndarray:
    if tf.hflip:
        a = a[..., :, ::-1]
    if tf.vflip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(a, tf.rot, axes=(-2, -1)))


def invert_transform(a: np.ndarray, tf: Transform) -> np.ndarray:
    a = np.rot90(a, -tf.rot, axes=(-2, -1))
    if tf.vflip:
        a = a[..., ::-1, :]
    if tf.hflip:
        a = a[..., :, ::-1]
    return np.ascontiguousarray(a)


def augment(image, mask, seed: int):
    """Same random flips and quarter-turn rotation for image and mask."""
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape[-1] != image.shape[-2]:
        raise DataError(f"augment needs square inputs, got {image.shape}")
    tf = draw_transform(seed)
    return apply_transform(image, tf), apply_transform(mask, tf)


# ----------------------------------------------------------------- PGM

_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")
MAX_PGM_PIXELS = 1 << 28


def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM as a (1, 1, h, w) float32 array scaled by 1/255."""
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise PgmError(f"{path}: malformed P5 header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise PgmError(f"{path}: maxval {maxval} unsupported, need 255")
    if w < 1 or h < 1 or w * h > MAX_PGM_PIXELS:
        raise PgmError(f"{path}: dimensions {w}x{h} out of range")
    payload = raw[m.end():]
    need = w * h
    if len(payload) < need:
        raise PgmError(f"{path}: payload truncated, {need - len(payload)} bytes short of {need}")
    pix = np.frombuffer(payload, dtype=np.uint8, count=need).reshape(h, w)
    return (pix.astype(np.float32) / 255.0)[None, None]


def quantize(a) -> np.ndarray:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if a.size and (a.min() < 0.0 or a.max() > 1.0 or not np.all(np.isfinite(a))):
        raise PgmError("image values must lie in [0, 1]")
    return np.floor(a * 255.0 + 0.5).astype(np.uint8)


def write_pgm(t, path) -> None:
    q = quantize(t)
    q = q.reshape(q.shape[-2], q.shape[-1])
    h, w = q.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + q.tobytes())


# ----------------------------------------------------------------- templates and manifests

@dataclass
class SceneTemplate:
    """Distribution over scene specs used to build a dataset."""

    hw: int = 64
    num_targets: tuple = (1, 1)
    target_sigma: tuple = (0.8, 2.0)
    target_amplitude: tuple = (0.35, 0.8)
    target_margin: int = 4
    background_level: tuple = (0.1, 0.3)
    clutter: Clutter = field(default_factory=lambda: Clutter(4, (3.0, 8.0), (0.05, 0.2)))
    noise_sigma: float = 5.0

    def __post_init__(self):
        if isinstance(self.clutter, dict):
            self.clutter = Clutter(**self.clutter)
        for name in ("num_targets", "target_sigma", "target_amplitude", "background_level"):
            setattr(self, name, tuple(getattr(self, name)))
        self.clutter.blob_sigma = tuple(self.clutter.blob_sigma)
        self.clutter.blob_amplitude = tuple(self.clutter.blob_amplitude)

    def draw(self, seed: int) -> SceneSpec:
        rng = SplitMix64(seed)
        lo, hi = self.num_targets
        n = lo + int(rng.integers(1, hi - lo + 1)[0])
        m = self.target_margin
        pos = rng.uniform(2 * n, m, self.hw - 1 - m).reshape(n, 2)
        sig = rng.uniform(n, *self.target_sigma)
        amp = rng.uniform(n, *self.target_amplitude)
        targets = [Target(float(x), float(y), float(s), float(a)) for (x, y), s, a in zip(pos, sig, amp)]
        bg = float(rng.uniform(1, *self.background_level)[0])
        return SceneSpec(self.hw, targets, Clutter(**asdict(self.clutter)), bg, self.noise_sigma,
                         derive_seed(seed, 0))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    # single faint Gaussian targets over broad, low-contrast clutter
    "default": SceneTemplate(),
    # bright clutter blobs at target scale, so clutter alone can mimic a target
    "hard": SceneTemplate(clutter=Clutter(6, (0.8, 2.5), (0.25, 0.6)), noise_sigma=10.0),
}


def preset(name: str, hw: Optional[int] = None) -> SceneTemplate:
    if name not in PRESETS:
        raise DataError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    d = PRESETS[name].to_dict()
    if hw is not None:
        d["hw"] = hw
    return SceneTemplate(**d)


@dataclass
class DatasetManifest:
    root: Path
    entries: list  # (split, image relpath, mask relpath)
    spec: dict = field(default_factory=dict)

    def split(self, tag: str) -> list:
        return [(self.root / i, self.root / m) for s, i, m in self.entries if s == tag]

    def load(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        pairs = self.split(tag)
        if not pairs:
            raise DataError(f"manifest has no {tag!r} entries")
        imgs = np.concatenate([read_pgm(i) for i, _ in pairs])
        masks = np.concatenate([read_pgm(m) for _, m in pairs])
        return imgs, (masks > 0.5).astype(np.float32)


MANIFEST_NAME = "manifest.tsv"
SPEC_ECHO_NAME = "manifest.json"


def build_manifest(root, split_ratio: float, template: SceneTemplate, count: int, seed: int) -> DatasetManifest:
    if not 0 <= split_ratio <= 1:
        raise DataError(f"split ratio {split_ratio} outside [0, 1]")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    n_train = int(round(count * split_ratio))
    entries = []
    for i in range(count):
        img, mask = synth_scene(template.draw(derive_seed(seed, i)))
        ip, mp = f"images/{i:05d}.pgm", f"masks/{i:05d}.pgm"
        write_pgm(img, root / ip)
        write_pgm(mask, root / mp)
        entries.append(("train" if i < n_train else "test", ip, mp))
    echo = {"template": template.to_dict(), "count": count, "seed": seed, "split_ratio": split_ratio}
    with open(root / MANIFEST_NAME, "w", newline="\n") as fh:
        for row in entries:
            fh.write("\t".join(row) + "\n")
    (root / SPEC_ECHO_NAME).write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return DatasetManifest(root, entries, echo)


def load_manifest(path) -> DatasetManifest:
    """Read a manifest file (or the directory holding one) and check every entry."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[0] not in ("train", "test"):
            raise DataError(f"{path}:{lineno}: expected '<train|test>\\t<image>\\t<mask>'")
        entries.append(tuple(parts))
    shape = None
    for split, ip, mp in entries:
        for rel in (ip, mp):
            if not (root / rel).exists():
                raise DataError(f"{path}: listed file missing: {rel}")
        si, sm = _pgm_dims(root / ip), _pgm_dims(root / mp)
        if si != sm:
            raise DataError(f"{path}: {ip} is {si} but its mask {mp} is {sm}")
        if shape is not None and si != shape:
            raise DataError(f"{path}: {ip} is {si}, expected {shape} like the other entries")
        shape = si
    echo_path = root / SPEC_ECHO_NAME
    spec = json.loads(echo_path.read_text()) if echo_path.exists() else {}
    return DatasetManifest(root, entries, spec)


def _pgm_dims(path) -> tuple:
    with open(path, "rb") as fh:
        head = fh.read(256)
    m = _PGM_HEADER.match(head)
    if not m:
        raise PgmError(f"{path}: malformed P5 header")
    return int(m.group(2)), int(m.group(1))


def manifest_hw(manifest: DatasetManifest) -> int:
    if not manifest.entries:
        raise DataError("empty manifest")
    h, w = _pgm_dims(manifest.root / manifest.entries[0][1])
    if h != w:
        raise DataError(f"manifest images are {h}x{w}; the network needs square inputs")
    return h
