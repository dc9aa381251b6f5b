"""Scaled ablation experiments on synthetic RGB-D data.

``VARIANTS`` maps the ablation names to model/training switches; the
helpers train a variant on a synthetic benchmark and score it on held-out
samples, or probe the adversarial game between the streams and the
modality discriminator.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from . import data as D
from . import losses as Lo
from . import model as Mo
from . import trainer as Tr
from .tensor import Tensor

VARIANTS = {
    "cmSalGAN": dict(stream="both", use_edge=True, use_afl=True),
    "cmSalGAN-AFL": dict(stream="both", use_edge=True, use_afl=False),
    "cmSalGAN-Edge": dict(stream="both", use_edge=False, use_afl=True),
    "G_RGB": dict(stream="rgb", use_edge=False, use_afl=False),
    "G_Depth": dict(stream="depth", use_edge=False, use_afl=False),
    "G_RGB+Depth": dict(stream="both", use_edge=False, use_afl=False),
}


def variant_configs(name: str, model_cfg: Mo.ModelConfig, train_cfg: Tr.TrainConfig) -> tuple:
    if name not in VARIANTS:
        raise KeyError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    v = dict(VARIANTS[name])
    use_afl = v.pop("use_afl")
    mcfg = Mo.ModelConfig.from_dict({**model_cfg.to_dict(), **v})
    tcfg = Tr.TrainConfig.from_dict({**train_cfg.to_dict(), "use_afl": use_afl})
    return mcfg, tcfg


def fusion_benchmark(seed: int = 0, count: int = 200, image_size: int = 32, test_fraction: float = 0.2) -> tuple:
    """(train, test): half the scenes have unusable RGB, half unusable depth."""
    spec = D.SynthSpec(count=count, seed=seed, image_size=image_size,
                       mode_mix={"corrupt_rgb": 0.5, "corrupt_depth": 0.5})
    samples = D.synth_generate(spec)
    n_test = int(round(test_fraction * count))
    return samples[n_test:], samples[:n_test]


@dataclass
class VariantResult:
    name: str
    seed: int
    max_f: float
    s: float
    mae: float
    steps: int


def run_variant(name: str, train: Sequence[D.RgbdSample], test: Sequence[D.RgbdSample], seed: int,
                epochs: int = 12, model_cfg: Mo.ModelConfig | None = None,
                train_cfg: Tr.TrainConfig | None = None) -> VariantResult:
    model_cfg = model_cfg or Mo.ModelConfig.toy(image_size=train[0].size)
    train_cfg = train_cfg or Tr.TrainConfig.toy(epochs=epochs, seed=seed)
    mcfg, tcfg = variant_configs(name, model_cfg, train_cfg)
    state = Tr.train(train, tcfg, mcfg)
    rep = Tr.evaluate(state, test)
    return VariantResult(name, seed, rep.mean_max_f, rep.mean_s, rep.mean_mae, state.step)


def compare_variants(names: Sequence[str], seeds: Sequence[int], epochs: int = 12, image_size: int = 32,
                     count: int = 200) -> dict:
    """name -> list of VariantResult, one per seed (dataset and init follow the seed)."""
    out = {n: [] for n in names}
    for seed in seeds:
        train, test = fusion_benchmark(seed, count, image_size)
        for n in names:
            out[n].append(run_variant(n, train, test, seed, epochs))
    return out


# ---------------------------------------------------------------------------
# adversarial pressure


def discriminator_accuracy(state: Tr.TrainState, samples: Sequence[D.RgbdSample], batch_size: int = 16) -> float:
    """Fraction of held-out stream predictions whose modality D names correctly."""
    p, cfg = state.params, state.model_cfg
    correct = total = 0
    from .tensor import no_grad
    with no_grad():
        for i in range(0, len(samples), batch_size):
            b = D.stack(samples[i:i + batch_size])
            out = Mo.forward_full(p, cfg, b["rgb"], b["depth"], use_edge=False)
            d_r = Mo.discriminate(p, Tensor(b["rgb"]), out.s_r).data.ravel()
            d_d = Mo.discriminate(p, Tensor(b["rgb"]), out.s_d).data.ravel()
            correct += int((d_r > 0.5).sum() + (d_d < 0.5).sum())
            total += 2 * len(d_r)
    return correct / total


@dataclass
class PressureResult:
    seed: int
    acc_frozen: float           # after D-only training against a frozen generator
    acc_alternating: float      # after the same number of alternating D/G steps
    trace: list = field(default_factory=list)


def _cycle(dataset, cfg, start_epoch=0):
    epoch = start_epoch
    while True:
        yield from Tr.epoch_batches(dataset, cfg, epoch)
        epoch += 1


def adversarial_pressure(seed: int = 0, image_size: int = 32, n_train: int = 64, n_val: int = 32,
                         warmup_steps: int = 60, d_steps: int = 200, adv_weight: float = 1.0,
                         eval_every: int = 25) -> PressureResult:
    """Play the modality game in two phases.

    A modality gap is created by warming up only the RGB stream (and fusion
    head) on the saliency loss; the depth stream keeps its initial weights.
    Phase 1 trains D alone for ``d_steps`` against the frozen generator.
    Phase 2 runs the same number of full alternating steps (D then G with
    the adversarial term). Held-out D accuracy is recorded after each phase.
    """
    samples = D.synth_generate(D.SynthSpec(count=n_train + n_val, seed=seed, image_size=image_size))
    train, val = samples[n_val:], samples[:n_val]
    mcfg = Mo.ModelConfig.toy(image_size=image_size, use_edge=False)
    tcfg = Tr.TrainConfig.toy(seed=seed, adv_weight=adv_weight, augment=False)
    state = Tr.new_state(mcfg, tcfg)
    p = state.params
    trace = []

    warm = Mo.param_group(p, "rgb") + Mo.param_group(p, "fuse")
    batches = _cycle(train, tcfg)
    for _ in range(warmup_steps):
        b = next(batches)
        Tr._set_trainable(p, warm)
        out = Mo.forward_full(p, mcfg, b["rgb"], b["depth"])
        total, _ = Lo.generator_loss(out, b["gt"], sup=tcfg.supervision)
        Tr._update(p, warm, total, state.adam_g, tcfg)

    for k in range(1, d_steps + 1):
        b = next(batches)
        Tr._set_trainable(p, [])
        out = Mo.forward_full(p, mcfg, b["rgb"], b["depth"])
        Tr.discriminator_phase(state, Tensor(b["rgb"]), out.s_r, out.s_d)
        if k % eval_every == 0:
            trace.append(("frozen", k, discriminator_accuracy(state, val)))
    acc_frozen = discriminator_accuracy(state, val)

    for k in range(1, d_steps + 1):
        Tr.train_step(state, next(batches))
        if k % eval_every == 0:
            trace.append(("alternating", k, discriminator_accuracy(state, val)))
    acc_alt = discriminator_accuracy(state, val)
    for t in p.values():
        t.requires_grad = False
    return PressureResult(seed, acc_frozen, acc_alt, trace)
