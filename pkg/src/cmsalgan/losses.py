"""Training objectives: pixel BCE, modality discriminator loss, generator
loss with deep supervision and the adversarial flip, edge BCE."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .model import SaliencyBundle
from .tensor import Tensor, _make

EPS = 1e-7
DEFAULT_SUPERVISION = (0.5, 0.5, 0.5, 0.8, 0.8)


@dataclass
class LossReport:
    bce_fused: float = 0.0
    bce_side: list = field(default_factory=lambda: [0.0] * 10)
    adv_generator: float = 0.0
    adv_discriminator: float = 0.0
    edge: float = 0.0
    total_generator: float = 0.0

    FIELDS = ("bce_fused",) + tuple(f"bce_side_{i}" for i in range(10)) + (
        "adv_generator", "adv_discriminator", "edge", "total_generator")

    def row(self) -> dict:
        d = asdict(self)
        side = d.pop("bce_side")
        out = {"bce_fused": d["bce_fused"]}
        out.update({f"bce_side_{i}": float(v) for i, v in enumerate(side)})
        for k in ("adv_generator", "adv_discriminator", "edge", "total_generator"):
            out[k] = d[k]
        return out


def bce(pred, target) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [EPS, 1 - EPS].

    The gradient is zero where the clamp is active.
    """
    pred = T.as_tensor(pred)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if t.shape != pred.shape:
        t = np.broadcast_to(t, pred.shape) if t.size == 1 else t
    if t.shape != pred.shape:
        raise ValueError(f"bce shape mismatch: pred {pred.shape} vs target {t.shape}")
    p = pred.data
    pc = np.clip(p, EPS, 1.0 - EPS)
    n = p.size
    val = -(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)).sum() / n
    inside = (p > EPS) & (p < 1.0 - EPS)

    def bw(g):
        return (g * inside * (pc - t) / (pc * (1.0 - pc)) / n,)

    return _make(np.asarray(val, dtype=pred.dtype), (pred,), bw, "bce")


def discriminator_loss(d_on_sr, d_on_sd) -> Tensor:
    """-ln D(I, S_r) - ln(1 - D(I, S_d)), batch-averaged: RGB labelled 1, depth 0."""
    return bce(d_on_sr, 1.0) + bce(d_on_sd, 0.0)


def adversarial_generator_loss(d_on_sr, d_on_sd) -> Tensor:
    """-ln(1 - D(I, S_r)) - ln D(I, S_d): the labels of the discriminator flipped."""
    return bce(d_on_sr, 0.0) + bce(d_on_sd, 1.0)


def edge_loss(edge_map, edge_gt) -> Tensor:
    return bce(edge_map, edge_gt)


def side_target(gt: np.ndarray, size: int) -> np.ndarray:
    """Ground truth at a side-output resolution: bilinear resize, threshold 0.5."""
    if gt.shape[-1] == size:
        return gt
    with T.no_grad():
        r = T.bilinear_resize(T.Tensor(gt), size, size).data
    return (r >= 0.5).astype(gt.dtype)


def generator_loss(bundle: SaliencyBundle, gt: np.ndarray, d_on_sr=None, d_on_sd=None,
                   sup=DEFAULT_SUPERVISION, edge_gt: np.ndarray | None = None,
                   adv_weight: float = 1.0) -> tuple:
    """Total generator objective and its per-term report.

    total = bce(fused) + sum_streams sum_i sup_i * bce(side_i)
            + adv_weight * [-ln(1 - D(S_r)) - ln D(S_d)]   (when D outputs given)
            + bce(edge_map, edge_gt)                      (when both given)
    """
    report = LossReport()
    fused = bce(bundle.s_fused, gt)
    total = fused
    report.bce_fused = float(fused.data)
    for k, (stream, sides) in enumerate((("rgb", bundle.side_r), ("depth", bundle.side_d))):
        for i, s in enumerate(sides):
            term = bce(s, side_target(gt, s.shape[-1]))
            report.bce_side[5 * k + i] = float(term.data)
            if sup[i]:
                total = total + sup[i] * term
    if d_on_sr is not None and d_on_sd is not None:
        adv = adversarial_generator_loss(d_on_sr, d_on_sd)
        report.adv_generator = float(adv.data)
        if adv_weight:
            total = total + adv_weight * adv
    if bundle.edge_map is not None and edge_gt is not None:
        e = edge_loss(bundle.edge_map, side_target(edge_gt, bundle.edge_map.shape[-1]))
        report.edge = float(e.data)
        total = total + e
    report.total_generator = float(total.data)
    return total, report
