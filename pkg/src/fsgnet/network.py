"""Full encoder-decoder assembly, complexity counting and checkpoint files."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .blocks import GpmBlock, GsgfLink, MfmBlock, MfmFlags, MiamBlock, MiamFlags
from .module import Conv2d, Module
from .tensor import Tensor, concat_channels, count_macs, pool2d, sigmoid, upsample2d

GSGF_FACTORS = (2, 4, 8, 16)
PLAIN_BLOCK = MiamFlags(use_pconv=False, use_residual=True, use_cam=False, use_sam=False)


@dataclass(frozen=True)
class FsgnetConfig:
    input_hw: int = 64
    stage_channels: tuple = (8, 16, 32, 64, 128)
    use_miam: bool = True
    use_mfm: bool = True
    use_gpm: bool = True
    gsgf_count: int = 4
    miam: MiamFlags = field(default_factory=MiamFlags)
    mfm: MfmFlags = field(default_factory=MfmFlags)
    bn_momentum: float = 0.1
    cam_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if isinstance(self.miam, dict):
            object.__setattr__(self, "miam", MiamFlags(**self.miam))
        if isinstance(self.mfm, dict):
            object.__setattr__(self, "mfm", MfmFlags(**self.mfm))

    def validate(self) -> "FsgnetConfig":
        hw = self.input_hw
        if hw < 16 or hw % 16 or hw & (hw - 1):
            raise ValueError(f"input_hw must be a power of two divisible by 16, got {hw}")
        if len(self.stage_channels) != 5 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels needs five positive widths")
        if not 0 <= self.gsgf_count <= len(GSGF_FACTORS):
            raise ValueError(f"gsgf_count must be in 0..4, got {self.gsgf_count}")
        if self.gsgf_count and not self.use_gpm:
            raise ValueError("guidance flows need the GPM bottleneck (use_gpm)")
        if self.cam_ratio < 1:
            raise ValueError("cam_ratio must be positive")
        if not 0 < self.bn_momentum <= 1:
            raise ValueError("bn_momentum must be in (0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FsgnetConfig":
        return cls(**d)

    def with_flags(self, **kw) -> "FsgnetConfig":
        return replace(self, **kw)


FEATURE_LAYERS = (
    [f"enc.{k}" for k in range(4)]
    + [f"mfm.{k}.{io}" for k in range(4) for io in ("in", "out")]
    + ["bottleneck", "gpm.fused", "gpm.aux"]
    + [f"dec.{k}" for k in range(4)]
)


class Fsgnet(Module):
    def __init__(self, cfg: FsgnetConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.stage_channels
        flags = cfg.miam if cfg.use_miam else PLAIN_BLOCK

        def block(i, o):
            return MiamBlock(i, o, rng, flags, cfg.cam_ratio, cfg.bn_momentum)

        self.enc = [block(1 if k == 0 else ch[k - 1], ch[k]) for k in range(4)]
        self.bottleneck = block(ch[3], ch[4])
        if cfg.use_gpm:
            self.gpm = GpmBlock(ch[4], rng, cfg.cam_ratio, cfg.bn_momentum)
            self.bottleneck_conv = None
        else:
            self.gpm = None
            self.bottleneck_conv = Conv2d(ch[4], ch[4], 3, rng)
        self.skips = [MfmBlock(ch[k], rng, cfg.mfm, cfg.cam_ratio, cfg.bn_momentum) for k in range(4)] \
            if cfg.use_mfm else []
        self.up_convs = [Conv2d(ch[k + 1], ch[k], 3, rng) for k in range(4)]
        self.dec = [block(2 * ch[k], ch[k]) for k in range(4)]
        # factor 2 feeds the deepest decoder stage (k=3), 16 the shallowest (k=0)
        self.links = [GsgfLink(ch[4], ch[4 - i - 1], f, rng, cfg.bn_momentum) for i, f in enumerate(GSGF_FACTORS[:cfg.gsgf_count])]
        self._link_at = {4 - i - 1: link for i, link in enumerate(self.links)}
        self.head = Conv2d(ch[0], 1, 1, rng)

    def forward(self, x: Tensor, taps: Optional[dict] = None):
        """Returns ``(o_final, aux)``; ``aux`` is None without the GPM."""
        hw = self.cfg.input_hw
        if len(x.shape) != 4 or x.shape[1:] != (1, hw, hw):
            raise ValueError(f"expected input (n, 1, {hw}, {hw}), got {x.shape}")
        tap = taps.__setitem__ if taps is not None else (lambda k, v: None)
        enc = []
        t = x
        for k, blk in enumerate(self.enc):
            if k:
                t = pool2d(t, "max", 2)
            t = blk(t)
            tap(f"enc.{k}", t)
            enc.append(t)
        b = self.bottleneck(pool2d(t, "max", 2))
        tap("bottleneck", b)
        aux_map = None
        if self.gpm is not None:
            fused, aux_map = self.gpm(b)
            tap("gpm.aux", aux_map)
        else:
            fused = self.bottleneck_conv(b)
        tap("gpm.fused", fused)

        d = fused
        for k in range(3, -1, -1):
            skip = enc[k]
            if self.skips:
                tap(f"mfm.{k}.in", skip)
                skip = self.skips[k](skip)
                tap(f"mfm.{k}.out", skip)
            up = self.up_convs[k](upsample2d(d, 2, "bilinear"))
            d = self.dec[k](concat_channels([skip, up]))
            link = self._link_at.get(k)
            if link is not None:
                d = link(d, fused)
            tap(f"dec.{k}", d)
        o_final = sigmoid(self.head(d))
        aux = None
        if aux_map is not None:
            aux = sigmoid(upsample2d(aux_map, hw // aux_map.shape[2], "bilinear"))
        return o_final, aux


def build_network(cfg: FsgnetConfig, seed: int = 0) -> Fsgnet:
    return Fsgnet(cfg, seed)


def count_params_flops(net: Module, input_shape: Optional[tuple] = None) -> tuple[int, int]:
    """Exact learnable scalar count and multiply-accumulate count for one sample.

    MACs cover convolutions (out_c * in_c/groups * kh * kw * out_h * out_w)
    and FFTs (5 * hw * log2(hw) per plane); elementwise work is ignored.
    """
    if input_shape is None:
        hw = net.cfg.input_hw
        input_shape = (1, 1, hw, hw)
    was_training = net.training
    net.eval()
    try:
        with count_macs() as counter:
            net(Tensor(np.zeros(input_shape)))
    finally:
        net.train(was_training)
    return net.num_parameters(), int(round(counter["macs"]))


# ----------------------------------------------------------------- checkpoints

MAGIC = b"FSGN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _state_arrays(net: Module) -> dict:
    arrays = {name: p.data for name, p in net.named_parameters()}
    arrays.update({name: buf for name, buf in net.named_buffers()})
    return arrays


def save_checkpoint(net: Fsgnet, path, optimizer_state: Optional[dict] = None, meta: Optional[dict] = None) -> None:
    """Write config, parameters, BN statistics and optional AdamW moments."""
    header = {"config": net.cfg.to_dict(), "meta": meta or {}}
    records = list(_state_arrays(net).items())
    if optimizer_state is not None:
        header["optimizer_step"] = int(optimizer_state["step"])
        for name, arr in optimizer_state["m"].items():
            records.append((f"optim.m.{name}", arr))
        for name, arr in optimizer_state["v"].items():
            records.append((f"optim.v.{name}", arr))
    blob = json.dumps(header, sort_keys=True).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(blob))
    out += blob
    for name, arr in records:
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


@dataclass
class Checkpoint:
    config: FsgnetConfig
    arrays: dict
    meta: dict
    optimizer_step: Optional[int] = None


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, not an FSGN checkpoint")
    pos = 4

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what} "
                                  f"(need {nbytes} bytes, {len(raw) - pos} left)")
        chunk = raw[pos:pos + nbytes]
        pos += nbytes
        return chunk

    version, blen = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(take(blen, "config").decode())
        cfg = FsgnetConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config blob: {exc}") from None
    arrays = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<I", take(4, "record name length"))
        name = take(nlen, "record name").decode()
        (rank,) = struct.unpack("<I", take(4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        payload = take(4 * count, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Checkpoint(cfg, arrays, header.get("meta", {}), header.get("optimizer_step"))


def load_state(net: Fsgnet, arrays: dict) -> None:
    """Copy stored arrays into ``net``; names and shapes must match exactly."""
    expected = _state_arrays(net)
    stored = {k: v for k, v in arrays.items() if not k.startswith("optim.")}
    missing = sorted(set(expected) - set(stored))
    extra = sorted(set(stored) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match network: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, arr in stored.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(f"shape mismatch for {name}: stored {arr.shape}, network {expected[name].shape}")
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    for name, arr in stored.items():
        if name in params:
            params[name].data = np.ascontiguousarray(arr, dtype=np.float32)
        else:
            buffers[name][...] = arr


def load_checkpoint(path, config: Optional[FsgnetConfig] = None) -> Fsgnet:
    """Rebuild a network from ``path``. With ``config`` given the stored
    tensors must fit a network of that configuration."""
    ckpt = read_checkpoint(path)
    net = build_network(config if config is not None else ckpt.config)
    load_state(net, ckpt.arrays)
    return net


def optimizer_state_from(ckpt: Checkpoint) -> Optional[dict]:
    if ckpt.optimizer_step is None:
        return None
    m = {k[len("optim.m."):]: v for k, v in ckpt.arrays.items() if k.startswith("optim.m.")}
    v = {k[len("optim.v."):]: v for k, v in ckpt.arrays.items() if k.startswith("optim.v.")}
    return {"step": ckpt.optimizer_step, "m": m, "v": v}
