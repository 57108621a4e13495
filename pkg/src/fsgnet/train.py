"""Training loop, evaluation, ablation sweeps and feature-map export."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .blocks import MfmFlags, MiamFlags
from .losses import total_loss
from .metrics import MetricsAccumulator, MetricsReport, report, roc_curve
from .network import (FEATURE_LAYERS, Fsgnet, FsgnetConfig, build_network, load_checkpoint,
                      save_checkpoint)
from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import NonFiniteError, Tape, Tensor, backward


class NumericError(FloatingPointError):
    """A loss or gradient went non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch: int = 8
    lr0: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    seed: int = 0
    eval_threshold: float = 0.5
    augment: bool = True
    clip: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))

    def validate(self) -> "TrainConfig":
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError(f"need 0 < lr_min <= lr0, got {self.lr_min} and {self.lr0}")
        if self.clip is not None and self.clip <= 0:
            raise ValueError("clip must be positive")
        return self


LOG_COLUMNS = ("epoch", "lr", "train_loss", "iou", "niou", "pd", "fa_e6")


@dataclass
class TrainResult:
    net: Fsgnet
    checkpoint: Path
    log: Path
    history: list = field(default_factory=list)  # one MetricsReport per epoch
    best_epoch: int = 0

    @property
    def final(self) -> MetricsReport:
        return self.history[-1]


def _batches(n: int, batch: int, seed: int) -> list:
    order = np.argsort(D.SplitMix64(seed).uniform(n), kind="stable")
    out = [order[i:i + batch] for i in range(0, n, batch)]
    # a lone trailing sample joins the previous batch: BN at a 1x1 bottleneck needs two values
    if len(out) > 1 and len(out[-1]) == 1:
        out[-2:] = [np.concatenate(out[-2:])]
    return out


def predict(net: Fsgnet, images: np.ndarray, batch: int = 8) -> np.ndarray:
    """Eval-mode saliency maps for an (n, 1, h, w) stack."""
    was = net.training
    net.eval()
    try:
        outs = [net(Tensor(images[i:i + batch]))[0].data for i in range(0, len(images), batch)]
    finally:
        net.train(was)
    return np.concatenate(outs)


def evaluate_arrays(net: Fsgnet, images: np.ndarray, masks: np.ndarray, threshold: float = 0.5,
                    batch: int = 8) -> tuple[MetricsReport, np.ndarray]:
    preds = predict(net, images, batch)
    acc = MetricsAccumulator(threshold=threshold)
    acc.update(preds, masks)
    return report(acc), preds


def _check_resolution(net_cfg: FsgnetConfig, manifest: D.DatasetManifest) -> None:
    hw = D.manifest_hw(manifest)
    if hw != net_cfg.input_hw:
        raise D.DataError(f"manifest images are {hw}x{hw} but the network expects {net_cfg.input_hw}")


def _clip(grads: list, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


def train(cfg: TrainConfig, net_cfg: FsgnetConfig, manifest: D.DatasetManifest, out_dir,
          verbose: bool = False) -> TrainResult:
    """Fit a fresh network and keep the checkpoint with the best test IoU.

    Writes ``best.ckpt``, ``last.ckpt`` and ``train_log.csv`` into ``out_dir``.
    """
    cfg.validate()
    net_cfg.validate()
    _check_resolution(net_cfg, manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x_train, y_train = manifest.load("train")
    x_test, y_test = manifest.load("test")

    net = build_network(net_cfg, cfg.seed)
    names = [n for n, _ in net.named_parameters()]
    params = net.parameters()
    state = AdamWState.zeros_like(params)
    n = len(x_train)
    steps_per_epoch = len(_batches(n, cfg.batch, 0))
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    columns = LOG_COLUMNS + (("grad_norm_max",) if cfg.clip is not None else ())
    log_buf = io.StringIO()
    writer = csv.writer(log_buf, lineterminator="\n")
    writer.writerow(columns)
    log_path = out_dir / "train_log.csv"
    best_iou, best_epoch = -1.0, 0
    history = []

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        losses = []
        lr = cfg.lr0
        max_norm = 0.0
        epoch_seed = D.derive_seed(cfg.seed, epoch)
        for idx in _batches(n, cfg.batch, epoch_seed):
            xb, yb = x_train[idx], y_train[idx]
            if cfg.augment:
                pairs = [D.augment(xb[j], yb[j], D.derive_seed(epoch_seed, int(i) + 1))
                         for j, i in enumerate(idx)]
                xb = np.stack([p[0] for p in pairs])
                yb = np.stack([p[1] for p in pairs])
            lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            try:
                with Tape() as tape:
                    o_final, aux = net(Tensor(xb))
                    loss = total_loss(o_final, aux, yb)
                net.zero_grad()
                backward(tape, loss, params)
            except NonFiniteError as exc:
                raise NumericError(f"epoch {epoch} step {step}: {exc}") from None
            grads = [p.grad for p in params]
            if not all(np.isfinite(g).all() for g in grads):
                raise NumericError(f"epoch {epoch} step {step}: non-finite gradient")
            if cfg.clip is not None:
                max_norm = max(max_norm, _clip(grads, cfg.clip))
            adamw_step(params, grads, state, lr, cfg.weight_decay, cfg.betas)
            losses.append(loss.item())
            step += 1
        rep, _ = evaluate_arrays(net, x_test, y_test, cfg.eval_threshold, cfg.batch)
        history.append(rep)
        row = [epoch, f"{lr:.6e}", f"{float(np.mean(losses)) if losses else float('nan'):.6f}",
               *(rep.row()[k] for k in ("iou", "niou", "pd", "fa_e6"))]
        if cfg.clip is not None:
            row.append(f"{max_norm:.6f}")
        writer.writerow(row)
        meta = {"epoch": epoch, "train": asdict(cfg), "iou": rep.iou}
        opt = {"step": state.step, "m": dict(zip(names, state.m)), "v": dict(zip(names, state.v))}
        if rep.iou > best_iou:
            best_iou, best_epoch = rep.iou, epoch
            save_checkpoint(net, out_dir / "best.ckpt", opt, meta)
        if verbose:
            print(f"epoch {epoch:4d}  lr {lr:.2e}  loss {row[2]}  iou {rep.iou:.4f}  pd {rep.pd:.4f}", flush=True)
        log_path.write_text(log_buf.getvalue())
    if cfg.epochs == 0:
        save_checkpoint(net, out_dir / "best.ckpt", None, {"epoch": 0, "train": asdict(cfg)})
    log_path.write_text(log_buf.getvalue())
    save_checkpoint(net, out_dir / "last.ckpt", None, {"epoch": cfg.epochs, "train": asdict(cfg)})
    return TrainResult(net, out_dir / "best.ckpt", log_path, history, best_epoch)


def evaluate(checkpoint, manifest: D.DatasetManifest, threshold: float = 0.5, roc_path=None,
             split: str = "test", batch: int = 8, noise_sigma: float = 0.0, noise_seed: int = 0):
    """Eval-mode metrics of a stored network on one manifest split.

    ``noise_sigma`` re-noises the images (gray levels) before inference.
    Returns ``(report, roc)``; ``roc`` is None unless ``roc_path`` is given.
    """
    net = checkpoint if isinstance(checkpoint, Fsgnet) else load_checkpoint(checkpoint)
    _check_resolution(net.cfg, manifest)
    images, masks = manifest.load(split)
    if noise_sigma:
        images = D.add_gaussian_noise(images, noise_sigma, noise_seed)
    rep, preds = evaluate_arrays(net, images, masks, threshold, batch)
    roc = None
    if roc_path is not None:
        roc = roc_curve(list(preds), list(masks))
        roc.write_csv(roc_path)
    return rep, roc


# ----------------------------------------------------------------- ablation sweeps

_ALL_OFF = dict(use_miam=False, use_mfm=False, use_gpm=False, gsgf_count=0)

ROW_SETS = {
    "modules": (("MIAM", "MFM", "GPM", "GSGF"), [
        ("a", (0, 0, 0, 0), _ALL_OFF),
        ("b", (1, 0, 0, 0), dict(_ALL_OFF, use_miam=True)),
        ("c", (1, 1, 0, 0), dict(_ALL_OFF, use_miam=True, use_mfm=True)),
        ("d", (1, 1, 1, 0), dict(use_miam=True, use_mfm=True, use_gpm=True, gsgf_count=0)),
        ("e", (1, 1, 1, 1), dict(use_miam=True, use_mfm=True, use_gpm=True, gsgf_count=4)),
    ]),
    "encoder": (("PConv", "Residual", "CAM", "SAM"), [
        (s, f, dict(miam=MiamFlags(*map(bool, f))))
        for s, f in (("a", (1, 0, 0, 0)), ("b", (1, 1, 0, 0)), ("c", (1, 1, 1, 0)), ("d", (1, 1, 1, 1)))
    ]),
    "skip": (("Dconv3", "Dconv5", "CAM", "FFT"), [
        (s, f, dict(mfm=MfmFlags(*map(bool, f))))
        for s, f in (("a", (1, 0, 0, 0)), ("b", (1, 1, 0, 0)), ("c", (1, 1, 1, 0)), ("d", (1, 1, 1, 1)))
    ]),
    "guidance": (("2x", "4x", "8x", "16x"), [
        (s, tuple(int(i < k) for i in range(4)), dict(gsgf_count=k))
        for s, k in (("a", 1), ("b", 2), ("c", 3), ("d", 4))
    ]),
}


def row_configs(row_set: str, base: FsgnetConfig) -> list:
    """``[(strategy, flag tuple, FsgnetConfig)]`` for a named row set."""
    if row_set not in ROW_SETS:
        raise ValueError(f"unknown row set {row_set!r}; choose from {sorted(ROW_SETS)}")
    _, rows = ROW_SETS[row_set]
    return [(s, flags, replace(base, **kw).validate()) for s, flags, kw in rows]


def ablate(base: FsgnetConfig, train_cfg: TrainConfig, row_set: str, seeds: Sequence[int],
           manifest: D.DatasetManifest, out_dir, dry_run: bool = False, verbose: bool = False) -> list:
    """Train every row x seed; writes ``<row_set>.csv`` with mean and std of IoU and nIoU."""
    if not seeds:
        raise ValueError("ablate needs at least one seed")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dry_run:
        train_cfg = replace(train_cfg, epochs=1)
    flag_names, _ = ROW_SETS.get(row_set, ((), None))
    results = []
    for strategy, flags, cfg in row_configs(row_set, base):
        ious, nious = [], []
        for s in seeds:
            res = train(replace(train_cfg, seed=s), cfg, manifest, out_dir / f"{row_set}_{strategy}_seed{s}")
            ious.append(res.final.iou)
            nious.append(res.final.niou)
            if verbose:
                print(f"{row_set} ({strategy}) seed {s}: iou {res.final.iou:.4f}", flush=True)
        results.append({"strategy": strategy, **dict(zip(flag_names, flags)),
                        "iou_mean": float(np.mean(ious)), "iou_std": float(np.std(ious)),
                        "niou_mean": float(np.mean(nious)), "niou_std": float(np.std(nious)),
                        "seeds": len(seeds)})
    with open(out_dir / f"{row_set}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", *flag_names, "iou_mean", "iou_std", "niou_mean", "niou_std", "seeds"])
        for r in results:
            w.writerow([r["strategy"], *(r[f] for f in flag_names), f"{r['iou_mean']:.6f}",
                        f"{r['iou_std']:.6f}", f"{r['niou_mean']:.6f}", f"{r['niou_std']:.6f}", r["seeds"]])
    return results


# ----------------------------------------------------------------- feature maps

def feature_layers(cfg: FsgnetConfig) -> list:
    """Tap names that a network of this configuration produces."""
    names = []
    for name in FEATURE_LAYERS:
        if name.startswith("mfm.") and not cfg.use_mfm:
            continue
        if name == "gpm.aux" and not cfg.use_gpm:
            continue
        names.append(name)
    return names


def normalize_map(a: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a flat map becomes 0.5 everywhere."""
    a = a.astype(np.float64)
    lo, hi = a.min(), a.max()
    if hi - lo <= 0:
        return np.full(a.shape, 0.5)
    return (a - lo) / (hi - lo)


def export_feature_maps(checkpoint, image, layers: Sequence[str], out_dir) -> list:
    """Write the channel-mean of each requested activation as ``<layer>.pgm``."""
    net = checkpoint if isinstance(checkpoint, Fsgnet) else load_checkpoint(checkpoint)
    valid = feature_layers(net.cfg)
    unknown = [n for n in layers if n not in valid]
    if unknown:
        raise ValueError(f"unknown layer(s) {unknown}; valid names: {', '.join(valid)}")
    img = D.read_pgm(image) if isinstance(image, (str, Path)) else np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[None, None]
    net.eval()
    taps = {}
    net(Tensor(img), taps)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in layers:
        fmap = normalize_map(taps[name].data[0].mean(axis=0))
        path = out_dir / f"{name}.pgm"
        D.write_pgm(fmap, path)
        paths.append(path)
    return paths
