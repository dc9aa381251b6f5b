"""Alternating generator/discriminator optimisation with Adam.

Per batch: the discriminator is updated on detached stream predictions
(generator untouched), then the generator is updated on the total
generator loss with the discriminator frozen. The shuffle order and every
augmentation are pure functions of (seed, epoch, sample id), so a run
resumed from an epoch checkpoint retraces the uninterrupted trajectory.
"""
from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import losses as Lo
from . import metrics as M
from . import model as Mo
from . import tensor as T
from .tensor import Tensor


class OptimizerStateError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    use_afl: bool = True
    adv_weight: float = 1.0
    d_steps: int = 1                       # discriminator updates per generator update
    grad_clip: Optional[float] = None      # global-norm clip, off by default
    supervision: tuple = Lo.DEFAULT_SUPERVISION
    augment: bool = True
    max_steps: Optional[int] = None
    edge_finetune_epochs: int = 10
    finetune_fuse: bool = True             # edge fine-tune also updates the fusion head
    checkpoint_every: int = 1              # epochs; 0 keeps only ``latest``

    def __post_init__(self):
        self.supervision = tuple(float(s) for s in self.supervision)
        self.validate()

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.edge_finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.d_steps < 0:
            raise ValueError("d_steps must be >= 0")
        if len(self.supervision) != 5:
            raise ValueError("supervision needs 5 weights")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Desk-scale preset: small synthetic sets need a larger step to converge
        within a few hundred updates."""
        base = dict(learning_rate=1e-3)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["supervision"] = list(self.supervision)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def arrays(self, prefix: str) -> dict:
        out = {f"{prefix}/m/{k}": a for k, a in self.m.items()}
        out.update({f"{prefix}/v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str, step: int) -> "AdamState":
        st = cls(step=step)
        for key, a in arrays.items():
            head, _, name = key.partition("/")
            if head != prefix:
                continue
            kind, _, name = name.partition("/")
            (st.m if kind == "m" else st.v)[name] = a
        return st


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``params[name].data`` in place."""
    missing = [k for k in params if grads.get(k) is None]
    if missing:
        raise OptimizerStateError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def _update(params: dict, names: Sequence[str], loss: Tensor, state: AdamState, cfg: TrainConfig) -> None:
    group = {k: params[k] for k in names}
    for t in group.values():
        t.grad = None
    T.backward(loss, list(group.values()))
    grads = {k: t.grad for k, t in group.items()}
    if cfg.grad_clip is not None:
        clip_global_norm(grads, cfg.grad_clip)
    adam_step(group, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    for t in group.values():
        t.grad = None


def _set_trainable(params: dict, names) -> None:
    names = set(names)
    for k, t in params.items():
        t.requires_grad = k in names


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    params: dict
    model_cfg: Mo.ModelConfig
    train_cfg: TrainConfig
    adam_g: AdamState = field(default_factory=AdamState)
    adam_d: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def afl_active(self) -> bool:
        return self.train_cfg.use_afl and self.model_cfg.stream == "both"

    def generator_names(self) -> list:
        names = []
        for s in self.model_cfg.streams:
            names += Mo.param_group(self.params, s)
        if self.model_cfg.use_edge:
            names += Mo.param_group(self.params, "edge")
        return names + Mo.param_group(self.params, "fuse")

    def disc_names(self) -> list:
        return Mo.param_group(self.params, "disc")


def new_state(model_cfg: Mo.ModelConfig, train_cfg: TrainConfig) -> TrainState:
    return TrainState(params=Mo.init_params(model_cfg, train_cfg.seed), model_cfg=model_cfg, train_cfg=train_cfg)


HISTORY_COLUMNS = ("step", "epoch") + Lo.LossReport.FIELDS


def save_state(path, state: TrainState) -> None:
    hist = np.array([[row[c] for c in HISTORY_COLUMNS] for row in state.history], dtype=np.float64)
    arrays = {"history": hist.reshape(-1, len(HISTORY_COLUMNS))}
    arrays.update(state.adam_g.arrays("adam_g"))
    arrays.update(state.adam_d.arrays("adam_d"))
    meta = {"train": state.train_cfg.to_dict(), "epoch": state.epoch, "step": state.step,
            "adam_g_step": state.adam_g.step, "adam_d_step": state.adam_d.step,
            "history_columns": list(HISTORY_COLUMNS)}
    Mo.save_checkpoint(path, state.params, state.model_cfg, state.train_cfg.seed, meta, arrays)


def load_state(path, train_cfg: TrainConfig | None = None) -> TrainState:
    params, mcfg, header, extra = Mo.load_checkpoint(path)
    tcfg = train_cfg or TrainConfig.from_dict(header["train"])
    cols = header["history_columns"]
    history = []
    for r in extra.get("history", np.zeros((0, len(cols)))):
        row = dict(zip(cols, (float(x) for x in r)))
        row["step"], row["epoch"] = int(row["step"]), int(row["epoch"])
        history.append(row)
    return TrainState(
        params=params, model_cfg=mcfg, train_cfg=tcfg,
        adam_g=AdamState.from_arrays(extra, "adam_g", header["adam_g_step"]),
        adam_d=AdamState.from_arrays(extra, "adam_d", header["adam_d_step"]),
        epoch=header["epoch"], step=header["step"], history=history,
    )


# ---------------------------------------------------------------------------
# one batch


def discriminator_phase(state: TrainState, rgb: Tensor, s_r: Tensor, s_d: Tensor) -> float:
    """One D update on detached stream predictions; returns the D loss."""
    p = state.params
    _set_trainable(p, state.disc_names())
    s_r, s_d = s_r.detach(), s_d.detach()
    loss = Lo.discriminator_loss(Mo.discriminate(p, rgb, s_r), Mo.discriminate(p, rgb, s_d))
    _update(p, state.disc_names(), loss, state.adam_d, state.train_cfg)
    return float(loss.data)


def generator_phase(state: TrainState, bundle: Mo.SaliencyBundle, rgb: Tensor, gt: np.ndarray,
                    edge_gt: np.ndarray | None) -> Lo.LossReport:
    """One G update with the discriminator frozen; ``bundle`` must carry a graph."""
    p, cfg = state.params, state.train_cfg
    for k in state.disc_names():
        p[k].requires_grad = False
    d_r = d_d = None
    if state.afl_active:
        d_r = Mo.discriminate(p, rgb, bundle.s_r)
        d_d = Mo.discriminate(p, rgb, bundle.s_d)
    total, report = Lo.generator_loss(bundle, gt, d_r, d_d, cfg.supervision,
                                      edge_gt if state.model_cfg.use_edge else None, cfg.adv_weight)
    _update(p, state.generator_names(), total, state.adam_g, cfg)
    return report


def train_step(state: TrainState, batch: dict) -> Lo.LossReport:
    """D-then-G update on one batch; advances ``state.step``."""
    p = state.params
    _set_trainable(p, state.generator_names())
    rgb = Tensor(batch["rgb"])
    bundle = Mo.forward_full(p, state.model_cfg, rgb, batch["depth"])
    d_loss = 0.0
    if state.afl_active:
        for _ in range(state.train_cfg.d_steps):
            d_loss = discriminator_phase(state, rgb, bundle.s_r, bundle.s_d)
    _set_trainable(p, state.generator_names())
    report = generator_phase(state, bundle, rgb, batch["gt"], batch.get("edge_gt"))
    report.adv_discriminator = d_loss
    for t in p.values():
        t.requires_grad = False
    state.step += 1
    return report


# ---------------------------------------------------------------------------
# epochs


def epoch_batches(dataset: Sequence[D.RgbdSample], cfg: TrainConfig, epoch: int):
    order = D.epoch_order(len(dataset), cfg.seed, epoch)
    for i in range(0, len(order), cfg.batch_size):
        samples = [dataset[j] for j in order[i:i + cfg.batch_size]]
        if cfg.augment:
            samples = [D.augment(s, D.sample_rng(cfg.seed, epoch, s.id)) for s in samples]
        yield D.stack(samples)


class _CsvLog:
    def __init__(self, path: Path | None, columns, rows=()):
        self.columns = list(columns)
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.w = csv.writer(self.fh)
            self.w.writerow(self.columns)
            for r in rows:
                self.write(r)

    def write(self, row: dict) -> None:
        if self.fh is not None:
            self.w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in self.columns])
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def evaluate(state: TrainState, dataset: Sequence[D.RgbdSample], batch_size: int = 8) -> M.MetricsReport:
    b = D.stack(dataset)
    pred = Mo.predict(state.params, state.model_cfg, b["rgb"], b["depth"], batch_size)
    return M.evaluate_dataset(list(pred), list(b["gt"]), ids=[s.id for s in dataset])


def train(dataset: Sequence[D.RgbdSample], train_cfg: TrainConfig | None = None,
          model_cfg: Mo.ModelConfig | None = None, run_dir=None, val: Sequence[D.RgbdSample] | None = None,
          state: TrainState | None = None, progress=None) -> TrainState:
    """Train from scratch, or continue ``state`` up to ``train_cfg.epochs``.

    With ``run_dir``: ``loss.csv`` (one row per step), ``timing.csv``,
    ``val.csv`` when ``val`` is given, and ``checkpoints/``.
    """
    if not len(dataset):
        raise ValueError("training dataset is empty")
    if state is None:
        train_cfg = train_cfg or TrainConfig()
        model_cfg = model_cfg or Mo.ModelConfig.toy(image_size=dataset[0].size)
        state = new_state(model_cfg, train_cfg)
    cfg = state.train_cfg
    if dataset[0].size != state.model_cfg.image_size:
        raise ValueError(f"dataset images are {dataset[0].size}px but the model expects "
                         f"{state.model_cfg.image_size}px")
    ckpt_dir = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    log = _CsvLog(run_dir / "loss.csv" if run_dir else None, HISTORY_COLUMNS, state.history)
    timing = _CsvLog(run_dir / "timing.csv" if run_dir else None, ("step", "seconds"))
    vlog = _CsvLog(run_dir / "val.csv" if run_dir and val else None, ("epoch", "maxF", "S", "MAE"))
    try:
        while state.epoch < cfg.epochs:
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            epoch = state.epoch
            for batch in epoch_batches(dataset, cfg, epoch):
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    break
                t0 = time.perf_counter()
                report = train_step(state, batch)
                row = {"step": state.step, "epoch": epoch + 1, **report.row()}
                state.history.append(row)
                log.write(row)
                timing.write({"step": state.step, "seconds": round(time.perf_counter() - t0, 4)})
                if progress:
                    progress(row)
            state.epoch += 1
            if val:
                r = evaluate(state, val)
                vlog.write({"epoch": state.epoch, "maxF": r.mean_max_f, "S": r.mean_s, "MAE": r.mean_mae})
            if ckpt_dir is not None:
                if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                    save_state(ckpt_dir / f"epoch_{state.epoch:04d}.npz", state)
                save_state(ckpt_dir / "latest.npz", state)
    finally:
        log.close()
        timing.close()
        vlog.close()
    return state


def finetune_edge(state: TrainState, dataset: Sequence[D.RgbdSample], train_cfg: TrainConfig | None = None,
                  run_dir=None) -> list:
    """Train the edge branch (and the fusion head unless disabled) with the streams frozen.

    Returns the mean edge BCE of each fine-tune epoch.
    """
    cfg = train_cfg or state.train_cfg
    if cfg.edge_finetune_epochs == 0 or not state.model_cfg.use_edge:
        return []
    p = state.params
    names = Mo.param_group(p, "edge") + (Mo.param_group(p, "fuse") if cfg.finetune_fuse else [])
    adam = AdamState()
    per_epoch = []
    rows = []
    for k in range(cfg.edge_finetune_epochs):
        epoch = state.epoch + k
        losses = []
        for batch in epoch_batches(dataset, cfg, epoch):
            _set_trainable(p, names)
            b = Mo.forward_full(p, state.model_cfg, batch["rgb"], batch["depth"], use_edge=True)
            e = Lo.edge_loss(b.edge_map, Lo.side_target(batch["edge_gt"], b.edge_map.shape[-1]))
            loss = e + Lo.bce(b.s_fused, batch["gt"]) if cfg.finetune_fuse else e
            _update(p, names, loss, adam, cfg)
            losses.append(float(e.data))
        per_epoch.append(float(np.mean(losses)))
        rows.append({"epoch": k + 1, "edge_bce": per_epoch[-1]})
    for t in p.values():
        t.requires_grad = False
    if run_dir is not None:
        run_dir = Path(run_dir)
        log = _CsvLog(run_dir / "edge_finetune.csv", ("epoch", "edge_bce"), rows)
        log.close()
        save_state(run_dir / "checkpoints" / "finetuned.npz", state)
    return per_epoch


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
