"""Two-stream saliency generator, modality discriminator, edge branch and
fusion head, plus checkpoint I/O.

Parameter names (flat dict):

``{rgb,depth}.enc.s{1..5}.b{j}.*``  encoder residual stages
``{rgb,depth}.dec.s{1..5}.*``       decoder stages, deepest first
``{rgb,depth}.side.s{1..5}.*``      1x1 side heads (stage 5 gives S_r / S_d)
``edge.*``                          edge branch on the RGB encoder
``fuse.*``                          fusion head
``disc.*``                          modality discriminator
"""
from __future__ import annotations

import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .tensor import Tensor

CHECKPOINT_FORMAT = "cmsalgan-checkpoint/1"

STAGE_STRIDES = (2, 2, 2, 1, 1)
STAGE_DILATIONS = (1, 1, 1, 2, 4)
GLOBAL_STAGES = (1, 2)


@dataclass
class ModelConfig:
    scale_preset: str = "toy"
    image_size: int = 64
    base_channels: int = 8
    stage_channels: Optional[tuple] = None
    blocks: tuple = (2, 2, 2, 2, 2)
    block_kind: str = "basic"
    decoder_channels: int = 16
    fuse_channels: int = 8
    lstm_hidden: int = 8
    local_window: int = 7
    edge_channels: int = 16
    edge_feature_channels: int = 64
    disc_channels: tuple = (3, 16, 32, 32, 32, 32)
    disc_fc: tuple = (100, 2, 1)
    stream: str = "both"
    use_edge: bool = True
    use_attention: bool = True

    def __post_init__(self):
        if self.stage_channels is None:
            b = self.base_channels
            mult = (1, 4, 8, 16, 32) if self.scale_preset == "paper" else (1, 2, 4, 4, 4)
            self.stage_channels = tuple(b * m for m in mult)
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks = tuple(int(b) for b in self.blocks)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.disc_fc = tuple(int(c) for c in self.disc_fc)
        self.validate()

    def validate(self) -> None:
        if self.image_size % 8 or self.image_size < 8:
            raise ValueError(f"image_size must be a positive multiple of 8, got {self.image_size}")
        if len(self.stage_channels) != 5 or min(self.stage_channels) < 1:
            raise ValueError(f"stage_channels must be 5 positive ints, got {self.stage_channels}")
        if len(self.blocks) != 5 or min(self.blocks) < 1:
            raise ValueError(f"blocks must be 5 positive ints, got {self.blocks}")
        if self.stream not in ("rgb", "depth", "both"):
            raise ValueError(f"stream must be rgb, depth or both, got {self.stream!r}")
        if self.block_kind not in ("basic", "bottleneck"):
            raise ValueError(f"block_kind must be basic or bottleneck, got {self.block_kind!r}")
        if self.local_window % 2 == 0:
            raise ValueError("local_window must be odd")
        if len(self.disc_channels) != 6 or len(self.disc_fc) != 3 or self.disc_fc[-1] != 1:
            raise ValueError("discriminator needs 6 conv widths and 3 fc widths ending in 1")

    @classmethod
    def toy(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        base = dict(scale_preset="paper", image_size=224, base_channels=64, blocks=(1, 3, 4, 6, 3),
                    block_kind="bottleneck", decoder_channels=64, fuse_channels=64, lstm_hidden=64,
                    local_window=7, disc_channels=(3, 32, 64, 64, 64, 64), disc_fc=(100, 2, 1))
        base.update(kw)
        return cls(**base)

    @property
    def streams(self) -> tuple:
        return ("rgb", "depth") if self.stream == "both" else (self.stream,)

    def stage_sizes(self) -> tuple:
        s = self.image_size
        return (s // 2, s // 4, s // 8, s // 8, s // 8)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class SaliencyBundle:
    s_fused: Tensor
    s_r: Optional[Tensor] = None
    s_d: Optional[Tensor] = None
    side_r: list = field(default_factory=list)
    side_d: list = field(default_factory=list)
    edge_map: Optional[Tensor] = None
    edge_feat: Optional[Tensor] = None

    def side_outputs(self) -> list:
        return list(self.side_r) + list(self.side_d)


# ---------------------------------------------------------------------------
# parameter construction


def _init_stream(p: dict, prefix: str, rng, cfg: ModelConfig) -> None:
    cin = 3
    for i, (cout, nblocks, stride) in enumerate(zip(cfg.stage_channels, cfg.blocks, STAGE_STRIDES), 1):
        for j in range(nblocks):
            L.init_residual_block(p, f"{prefix}enc.s{i}.b{j}.", rng, cin, cout,
                                  stride if j == 0 else 1, cfg.block_kind)
            cin = cout
    dc = cfg.decoder_channels
    sizes = cfg.stage_sizes()
    hw_global = sizes[4] * sizes[4]
    for i in range(1, 6):
        enc_ch = cfg.stage_channels[5 - i]
        name = f"{prefix}dec.s{i}."
        if i == 1:
            L.init_conv(p, name + "conv", rng, enc_ch, dc, 3)
        else:
            if sizes[5 - i] != sizes[6 - i]:
                L.init_deconv(p, name + "up", rng, dc, dc, 2)
            L.init_conv(p, name + "conv", rng, enc_ch + dc, dc, 3)
        if i in GLOBAL_STAGES:
            L.init_directional_scan(p, name + "scan.", rng, dc, cfg.lstm_hidden)
            L.init_conv(p, name + "att", rng, 2 * cfg.lstm_hidden, hw_global, 1, gain=0.1)
        else:
            L.init_conv(p, name + "ctx", rng, dc, dc, 3)
            L.init_conv(p, name + "att", rng, dc, cfg.local_window ** 2, 1, gain=0.1)
        L.init_conv(p, f"{prefix}side.s{i}", rng, dc, 1, 1, gain=0.5)


def _init_edge(p: dict, rng, cfg: ModelConfig) -> None:
    ec = cfg.edge_channels
    for i in range(1, 4):
        L.init_residual_block(p, f"edge.s{i}.", rng, cfg.stage_channels[i - 1], ec)
    L.init_conv(p, "edge.merge", rng, 3 * ec, cfg.edge_feature_channels, 1)
    L.init_conv(p, "edge.out", rng, cfg.edge_feature_channels, 1, 1, gain=0.5)


def _init_fuse(p: dict, rng, cfg: ModelConfig) -> None:
    fc = cfg.fuse_channels
    for s in cfg.streams:
        L.init_deconv(p, f"fuse.up_{s}", rng, cfg.decoder_channels, fc, 2)
    L.init_conv(p, "fuse.conv", rng, fc * len(cfg.streams), fc, 3)
    # the edge-feature slice of the same 3x3 conv, kept separate so the head
    # also runs without the edge branch
    L.init_conv(p, "fuse.conv_edge", rng, cfg.edge_feature_channels, fc, 3, gain=0.5, bias=False)
    L.init_conv(p, "fuse.out", rng, fc, 1, 1, gain=0.5)


def _init_disc(p: dict, rng, cfg: ModelConfig) -> None:
    c1, c2, c3, c4, c5, c6 = cfg.disc_channels
    L.init_conv(p, "disc.conv1", rng, 4, c1, 1)
    L.init_conv(p, "disc.conv2", rng, c1, c2, 3)
    L.init_conv(p, "disc.conv3", rng, c2, c3, 3)
    L.init_conv(p, "disc.conv4", rng, c3, c4, 3)
    L.init_conv(p, "disc.conv5", rng, c4, c5, 3)
    L.init_conv(p, "disc.conv6", rng, c5, c6, 3)
    flat = c6 * (cfg.image_size // 8) ** 2
    f7, f8, f9 = cfg.disc_fc
    L.init_linear(p, "disc.fc7", rng, flat, f7)
    L.init_linear(p, "disc.fc8", rng, f7, f8)
    L.init_linear(p, "disc.fc9", rng, f8, f9)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict:
    """Fresh parameters; both streams start from one shared initialisation."""
    rng = np.random.default_rng(seed)
    with T.default_dtype(dtype or T.get_default_dtype()):
        raw: dict = {}
        shared: dict = {}
        _init_stream(shared, "", rng, cfg)
        for s in cfg.streams:
            for k, v in shared.items():
                raw[f"{s}.{k}"] = v.copy()
        _init_edge(raw, rng, cfg)
        _init_fuse(raw, rng, cfg)
        _init_disc(raw, rng, cfg)
    return {k: Tensor(v) for k, v in raw.items()}


def cast_params(p: dict, dtype) -> dict:
    return {k: Tensor(v.data.astype(dtype)) for k, v in p.items()}


def param_group(p: dict, group: str) -> list:
    """Names in one of: stream, rgb, depth, edge, fuse, disc."""
    if group == "stream":
        return [k for k in p if k.startswith(("rgb.", "depth."))]
    return [k for k in p if k.startswith(group + ".")]


def param_count(p: dict, group: str | None = None) -> int:
    names = p if group is None else param_group(p, group)
    return int(sum(p[k].size for k in names))


# ---------------------------------------------------------------------------
# forward pieces


def encode(p: dict, prefix: str, x: Tensor, cfg: ModelConfig) -> list:
    """Five encoder stages; resolutions S/2, S/4, S/8, S/8, S/8."""
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"encoder expects (N, 3, S, S) input, got {x.shape}")
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValueError(f"encoder expects {cfg.image_size}x{cfg.image_size} input, got {x.shape[2:]}")
    feats = []
    for i in range(1, 6):
        for j in range(cfg.blocks[i - 1]):
            stride = STAGE_STRIDES[i - 1] if j == 0 else 1
            x = L.residual_block(p, f"{prefix}enc.s{i}.b{j}.", x, stride, STAGE_DILATIONS[i - 1])
        feats.append(x)
    return feats


def refine(p: dict, name: str, x: Tensor, stage: int, cfg: ModelConfig) -> Tensor:
    """x + attended(x): global scan attention at stages 1-2, local window after."""
    if stage in GLOBAL_STAGES:
        ctx = L.directional_scan(p, name + "scan.", x)
        logits = L.attention_logits(p, name + "att", ctx)
        return x + L.attention_pool(x, logits, "global")
    ctx = T.relu(L.conv(p, name + "ctx", x))
    logits = L.attention_logits(p, name + "att", ctx)
    return x + L.attention_pool(x, logits, "local", cfg.local_window)


def decode(p: dict, prefix: str, enc: list, cfg: ModelConfig, use_attention: bool = True) -> list:
    """Decoder stages deepest first; Dec^i fuses Enc^(6-i) with Dec^(i-1)."""
    dec = []
    prev = None
    for i in range(1, 6):
        e = enc[5 - i]
        name = f"{prefix}dec.s{i}."
        if prev is None:
            x = e
        else:
            up = prev
            if name + "up.w" in p:
                up = T.conv2d_transpose(up, p[name + "up.w"], p[name + "up.b"], stride=2)
            x = T.concat([e, up], axis=1)
        x = T.relu(L.conv(p, name + "conv", x))
        if use_attention:
            x = refine(p, name, x, i, cfg)
        dec.append(x)
        prev = x
    return dec


def side_predict(p: dict, name: str, dec: Tensor) -> Tensor:
    return T.sigmoid(L.conv(p, name, dec))


def discriminate(p: dict, rgb: Tensor, saliency: Tensor, trace: list | None = None) -> Tensor:
    """Probability (N, 1) that ``saliency`` came from the RGB stream.

    ``trace``, when given, collects ``(layer, output shape)`` pairs.
    """
    rgb = T.as_tensor(rgb)
    s = rgb.shape[-1]
    sal = T.bilinear_resize(saliency, s, s)
    if sal.shape[-2:] != rgb.shape[-2:]:
        raise ValueError(f"saliency {sal.shape} does not match image {rgb.shape}")
    log = trace.append if trace is not None else (lambda item: None)
    x = T.concat([rgb, sal], axis=1)
    log(("input", x.shape))
    for layer in ("conv1", "conv2", "pool1", "conv3", "conv4", "pool2", "conv5", "conv6", "pool3"):
        if layer.startswith("pool"):
            x = T.max_pool2d(x, 2)
        else:
            x = T.relu(L.conv(p, "disc." + layer, x))
        log((layer, x.shape))
    x = x.reshape(x.shape[0], -1)
    for layer in ("fc7", "fc8"):
        x = T.tanh(T.linear(x, p[f"disc.{layer}.w"], p[f"disc.{layer}.b"]))
        log((layer, x.shape))
    x = T.sigmoid(T.linear(x, p["disc.fc9.w"], p["disc.fc9.b"]))
    log(("fc9", x.shape))
    return x


def edge_features(p: dict, enc1: Tensor, enc2: Tensor, enc3: Tensor) -> tuple:
    """Residual blocks on the three shallow stages -> (64-ch feature, edge map) at S/2."""
    size = enc1.shape[-1]
    parts = []
    for i, e in enumerate((enc1, enc2, enc3), 1):
        f = L.residual_block(p, f"edge.s{i}.", e)
        parts.append(T.bilinear_resize(f, size, size))
    feat = T.relu(L.conv(p, "edge.merge", T.concat(parts, axis=1)))
    return feat, T.sigmoid(L.conv(p, "edge.out", feat))


def fuse_predict(p: dict, decs: dict, edge_feat: Tensor | None = None) -> Tensor:
    """Full-resolution fused saliency from the last decoder stage of each stream.

    conv3x3(concat(ups, e)) is evaluated as conv(ups) + conv_edge(e); with no
    edge feature the edge slice contributes nothing.
    """
    ups = [T.conv2d_transpose(d, p[f"fuse.up_{s}.w"], p[f"fuse.up_{s}.b"], stride=2)
           for s, d in decs.items()]
    x = L.conv(p, "fuse.conv", T.concat(ups, axis=1))
    if edge_feat is not None:
        size = ups[0].shape[-1]
        x = x + L.conv(p, "fuse.conv_edge", T.bilinear_resize(edge_feat, size, size))
    return T.sigmoid(L.conv(p, "fuse.out", T.relu(x)))


def depth_to_3ch(depth) -> Tensor:
    d = T.as_tensor(depth)
    return T.concat([d, d, d], axis=1)


def run_streams(p: dict, cfg: ModelConfig, rgb, depth, use_attention: bool | None = None) -> dict:
    """Encoder and decoder pyramids per active stream."""
    use_attention = cfg.use_attention if use_attention is None else use_attention
    inputs = {"rgb": T.as_tensor(rgb), "depth": depth_to_3ch(depth)}
    out = {}
    for s in cfg.streams:
        enc = encode(p, f"{s}.", inputs[s], cfg)
        out[s] = (enc, decode(p, f"{s}.", enc, cfg, use_attention))
    return out


def forward_full(p: dict, cfg: ModelConfig, rgb, depth, use_edge: bool | None = None,
                 use_attention: bool | None = None) -> SaliencyBundle:
    """Inference/training forward pass without the discriminator."""
    use_edge = cfg.use_edge if use_edge is None else use_edge
    streams = run_streams(p, cfg, rgb, depth, use_attention)
    sides = {}
    for s, (_, dec) in streams.items():
        sides[s] = [side_predict(p, f"{s}.side.s{i}", d) for i, d in enumerate(dec, 1)]
    edge_feat = edge_map = None
    if use_edge:
        enc = streams["rgb"][0] if "rgb" in streams else streams["depth"][0]
        edge_feat, edge_map = edge_features(p, *enc[:3])
    fused = fuse_predict(p, {s: dec[-1] for s, (_, dec) in streams.items()}, edge_feat)
    return SaliencyBundle(
        s_fused=fused,
        s_r=sides["rgb"][-1] if "rgb" in sides else None,
        s_d=sides["depth"][-1] if "depth" in sides else None,
        side_r=sides.get("rgb", []),
        side_d=sides.get("depth", []),
        edge_map=edge_map,
        edge_feat=edge_feat,
    )


def predict(p: dict, cfg: ModelConfig, rgb: np.ndarray, depth: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Fused saliency maps (N, 1, S, S) as a numpy array."""
    outs = []
    with T.no_grad():
        for i in range(0, len(rgb), batch_size):
            b = forward_full(p, cfg, rgb[i:i + batch_size], depth[i:i + batch_size])
            outs.append(b.s_fused.data)
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict, cfg: ModelConfig, seed: int, meta: dict | None = None,
                    arrays: dict | None = None) -> None:
    """npz container: ``param/<name>`` tensors, optional extra arrays and a JSON header."""
    header = {"format": CHECKPOINT_FORMAT, "model": cfg.to_dict(), "seed": seed}
    header.update(meta or {})
    payload = {f"param/{k}": v.data for k, v in params.items()}
    for k, v in (arrays or {}).items():
        payload[k] = v
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> tuple:
    """Returns (params, ModelConfig, header, extra_arrays)."""
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        params, extra = {}, {}
        for k in z.files:
            if k.startswith("param/"):
                params[k[len("param/"):]] = Tensor(z[k].copy())
            elif k != "__header__":
                extra[k] = z[k].copy()
    cfg = ModelConfig.from_dict(_tuplify(header["model"]))
    return params, cfg, header, extra


def _tuplify(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
