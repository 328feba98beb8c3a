"""Training loop, metrics log, checkpoints and curve export."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import SceneDataset, SceneSpec, gen_dataset
from .evaluation import APSummary, compute_ap, detections_from_outputs
from .losses import LossWeights, set_loss
from .transformer import Detector, ModelConfig, count_macs

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SLOW_LR_KEYS = ("reference_head", "sampling_offsets")


def _opt(section, default, **kw):
    return field(default=default, metadata={"section": section, **kw})


@dataclass
class RunConfig:
    # model
    d_model: int = _opt("model", 64)
    n_heads: int = _opt("model", 8)
    n_points: int = _opt("model", 4)
    n_levels: int = _opt("model", 4)
    enc_layers: int = _opt("model", 2)
    dec_layers: int = _opt("model", 2)
    ffn_dim: int = _opt("model", 256)
    num_queries: int = _opt("model", 30)
    mode: str = _opt("model", "plain", choices=("plain", "refine", "two_stage"))
    attention: str = _opt("model", "deformable", choices=("deformable", "dense"))
    init_box_size: float = _opt("model", 0.1)
    # optimizer
    lr: float = _opt("optim", 5e-4)
    slow_lr_factor: float = _opt("optim", 0.1)
    weight_decay: float = _opt("optim", 1e-4)
    beta1: float = _opt("optim", 0.9)
    beta2: float = _opt("optim", 0.999)
    lr_drop: int = _opt("optim", 10)
    lr_drop_factor: float = _opt("optim", 0.1)
    clip_norm: float = _opt("optim", 0.1)
    batch_size: int = _opt("optim", 16)
    epochs: int = _opt("optim", 12)
    # data
    n_train: int = _opt("data", 1024)
    n_val: int = _opt("data", 128)
    image_size: int = _opt("data", 64)
    data_seed: int = _opt("data", 0)
    # run
    seed: int = _opt("run", 0)
    dtype: str = _opt("run", "float32", choices=("float32", "float64"))
    out_dir: str = _opt("run", "runs/default")

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        self.model_config()  # validates the model fields

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, n_points=self.n_points, n_levels=self.n_levels,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers, ffn_dim=self.ffn_dim,
            num_queries=self.num_queries, image_size=self.image_size, mode=self.mode,
            attention=self.attention, init_box_size=self.init_box_size,
        )

    def scene_spec(self, split: str = "train") -> SceneSpec:
        offset = {"train": 0, "val": 1}[split]
        return SceneSpec(image_size=self.image_size, seed=2 * self.data_seed + offset)

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def replace(self, **changes) -> "RunConfig":
        return RunConfig(**{**asdict(self), **changes})

    # ---- flat INI mirror -------------------------------------------------

    def to_ini(self, path) -> Path:
        parser = configparser.ConfigParser()
        for f in fields(self):
            parser.setdefault(f.metadata["section"], {})
            parser[f.metadata["section"]][f.name] = str(getattr(self, f.name))
        path = Path(path)
        with path.open("w") as fh:
            parser.write(fh)
        return path

    @classmethod
    def from_ini(cls, path, **overrides) -> "RunConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(path)
        known = {f.name: f for f in fields(cls)}
        values = {}
        for section in parser.sections():
            for key, raw in parser[section].items():
                if key not in known or known[key].metadata["section"] != section:
                    raise ValueError(f"unknown config key [{section}] {key}")
                values[key] = _parse(known[key], raw)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _parse(f, raw: str):
    kind = type(f.default)
    return kind(raw) if kind in (int, float) else raw


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float  # mean over the epoch's batches; NaN before training
    loss: float  # validation terms below are weighted sums / unweighted parts
    loss_cls: float
    loss_l1: float
    loss_giou: float
    ap: float
    ap50: float
    ap75: float
    ap_s: float
    ap_m: float
    ap_l: float
    wall_clock: float  # seconds since the run started
    macs: int  # attention multiply-accumulates for one validation image

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]


# ---- checkpoints --------------------------------------------------------------


def save_checkpoint(model: Detector, path, config: RunConfig | None = None, epoch: int = 0) -> Path:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["format_version"] = np.array(CHECKPOINT_VERSION)
    arrays["epoch"] = np.array(epoch)
    arrays["model_config"] = np.array(json.dumps(asdict(model.cfg)))
    if config is not None:
        arrays["run_config"] = np.array(json.dumps(asdict(config)))
    path = Path(path)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path):
    """Returns ``(model, run_config or None, epoch)``."""
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        model = Detector(ModelConfig(**json.loads(str(z["model_config"]))))
        state = {k[len("param/"):]: torch.from_numpy(z[k]) for k in z.files if k.startswith("param/")}
        dtype = next(iter(state.values())).dtype
        model.to(dtype)
        model.load_state_dict(state)
        config = RunConfig(**json.loads(str(z["run_config"]))) if "run_config" in z.files else None
        return model, config, int(z["epoch"])


# ---- training -----------------------------------------------------------------


def build_model(config: RunConfig) -> Detector:
    torch.manual_seed(config.seed)
    model = Detector(config.model_config())
    return model.to(config.torch_dtype)


def param_groups(model, config: RunConfig):
    slow, rest = [], []
    for name, p in model.named_parameters():
        (slow if any(k in name for k in SLOW_LR_KEYS) else rest).append(p)
    groups = [{"params": rest, "lr": config.lr, "base_lr": config.lr}]
    if slow:
        lr = config.lr * config.slow_lr_factor
        groups.append({"params": slow, "lr": lr, "base_lr": lr})
    return groups


def _torch_targets(dataset: SceneDataset, indices, dtype):
    return [{"labels": torch.as_tensor(dataset.labels[i]), "boxes": torch.as_tensor(dataset.boxes[i], dtype=dtype)}
            for i in indices]


def _loss(model, out, targets, weights):
    enc = out.get("encoder") if model.cfg.mode == "two_stage" else None
    return set_loss(out["layers"], targets, weights, encoder_output=enc)


@torch.no_grad()
def evaluate(model: Detector, dataset: SceneDataset, batch_size: int = 32, weights=LossWeights()):
    """Validation loss terms, AP summary and per-image attention MACs."""
    model.eval()
    dtype = next(model.parameters()).dtype
    dets, totals, n = [], {"total": 0.0, "cls": 0.0, "l1": 0.0, "giou": 0.0}, 0
    macs = 0
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        images = torch.as_tensor(dataset.images[idx], dtype=dtype)
        if start == 0:
            with count_macs(model) as counter:
                model(images[:1])
            macs = counter.total
        out = model(images)
        _, parts = _loss(model, out, _torch_targets(dataset, idx, dtype), weights)
        for k in totals:
            totals[k] += parts[k] * len(idx)
        n += len(idx)
        last = out["layers"][-1]
        dets += detections_from_outputs(last["logits"], last["boxes"], image_ids=idx)
    model.train()
    summary = compute_ap(dets, dataset.records())
    losses = {k: v / max(n, 1) for k, v in totals.items()}
    return losses, summary, macs


class Divergence(RuntimeError):
    pass


def train(config: RunConfig, train_set: SceneDataset | None = None, val_set: SceneDataset | None = None,
          *, weights: LossWeights = LossWeights(), write: bool = True):
    """Train from scratch; returns ``(model, metrics rows)``.

    Writes ``config.ini``, ``metrics.csv`` (one row per epoch, appended as it
    goes) and ``checkpoint.npz`` under ``config.out_dir`` when ``write`` is set.
    Row 0 evaluates the initialization.
    """
    torch.set_num_threads(1)
    if train_set is None:
        train_set = gen_dataset(config.scene_spec("train"), config.n_train, max_queries=config.num_queries)
    if val_set is None:
        val_set = gen_dataset(config.scene_spec("val"), config.n_val, max_queries=config.num_queries)
    out_dir = Path(config.out_dir)
    metrics_path = out_dir / "metrics.csv"
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.to_ini(out_dir / "config.ini")
        export_curves([], metrics_path)

    model = build_model(config)
    dtype = config.torch_dtype
    optimizer = torch.optim.AdamW(param_groups(model, config), lr=config.lr, betas=(config.beta1, config.beta2),
                                  weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    rows = []

    def record(epoch, train_loss):
        losses, summary, macs = evaluate(model, val_set, weights=weights)
        row = MetricsRow(epoch, train_loss, losses["total"], losses["cls"], losses["l1"], losses["giou"],
                         **summary.as_dict(), wall_clock=time.perf_counter() - t0, macs=macs)
        rows.append(row)
        if write:
            _append_row(metrics_path, row)
        log.info("epoch %d loss %.4f AP50 %.3f", epoch, row.loss, row.ap50)

    record(0, float("nan"))
    for epoch in range(1, config.epochs + 1):
        factor = config.lr_drop_factor if epoch > config.lr_drop else 1.0
        for group in optimizer.param_groups:
            group["lr"] = group["base_lr"] * factor
        order = rng.permutation(len(train_set))
        batch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            images = torch.as_tensor(train_set.images[idx], dtype=dtype)
            out = model(images)
            last = out["layers"][-1]
            if not (torch.isfinite(last["logits"]).all() and torch.isfinite(last["boxes"]).all()):
                raise Divergence(f"non-finite predictions at epoch {epoch}, batch starting {start}")
            loss, _ = _loss(model, out, _torch_targets(train_set, idx, dtype), weights)
            if not torch.isfinite(loss):
                raise Divergence(f"non-finite loss {float(loss)} at epoch {epoch}, batch starting {start}")
            optimizer.zero_grad()
            loss.backward()
            if config.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
            optimizer.step()
            batch_losses.append(float(loss.detach()))
        record(epoch, float(np.mean(batch_losses)))

    if write:
        save_checkpoint(model, out_dir / "checkpoint.npz", config, epoch=config.epochs)
    return model, rows


# ---- metrics files ------------------------------------------------------------


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _append_row(path, row: MetricsRow):
    with Path(path).open("a", newline="") as fh:
        csv.writer(fh).writerow([_fmt(getattr(row, c)) for c in MetricsRow.columns()])


def export_curves(rows, path) -> Path:
    """Write metrics rows to CSV with the fixed :meth:`MetricsRow.columns` header.

    Floats are written with ``repr`` so parsing gives back identical values.
    Raises ``ValueError`` if epochs are not strictly increasing.
    """
    if rows is None:
        raise FileNotFoundError("no metrics log")
    epochs = [r.epoch for r in rows]
    if any(b <= a for a, b in zip(epochs, epochs[1:])):
        raise ValueError("epochs must be strictly increasing")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.columns())
        for row in rows:
            w.writerow([_fmt(getattr(row, c)) for c in MetricsRow.columns()])
    return path


def read_curves(path) -> list:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing metrics log {path}")
    types = {f.name: f.type for f in fields(MetricsRow)}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MetricsRow.columns():
            raise ValueError(f"unexpected header {reader.fieldnames}")
        return [MetricsRow(**{k: (int(v) if types[k] in ("int", int) else float(v)) for k, v in rec.items()})
                for rec in reader]


def epochs_to_reach(rows, threshold: float, key: str = "ap50") -> float:
    """First epoch whose ``key`` is at least ``threshold``; ``inf`` if never."""
    for row in rows:
        value = getattr(row, key)
        if not math.isnan(value) and value >= threshold:
            return row.epoch
    return math.inf


def final_summary(rows) -> APSummary:
    last = rows[-1]
    return APSummary(last.ap, last.ap50, last.ap75, last.ap_s, last.ap_m, last.ap_l)
