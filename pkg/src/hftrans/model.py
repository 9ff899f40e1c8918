"""Hybrid-fusion segmentation transformer.

The model runs one CNN encoder per fusion-spec entry (e.g. all modalities
jointly plus each modality alone), embeds every encoder's 1/8-scale feature
map into 2x2x2-patch tokens with a learnable positional embedding, fuses all
tokens globally in a pre-norm transformer, and decodes back to full
resolution with stride-2 deconvolutions, concatenating the same-scale skip
features of every encoder at each stage. A 1x1x1 head emits per-class
logits; :func:`model_forward` returns voxel-wise softmax probabilities.

Parameters live in a flat ``name -> array`` dict so they can be bound to a
tape as leaves for training or wrapped as constants for inference, updated
out of place by the optimizer, and serialized to the "HFTC" checkpoint
format byte-reproducibly (sorted name order, little-endian).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FUSION_MODES = ("early", "middle", "hybrid", "hybrid_star", "custom")

CHECKPOINT_MAGIC = b"HFTC"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Checkpoint file is malformed or from an unsupported version."""


@dataclass(frozen=True)
class FusionSpec:
    """Ordered encoder inputs; each entry is a subset of modalities 1..N."""

    encoder_inputs: tuple[tuple[int, ...], ...]

    @property
    def num_encoders(self) -> int:
        return len(self.encoder_inputs)


def make_fusion_spec(mode: str, n: int,
                     custom: Sequence[Sequence[int]] | None = None) -> FusionSpec:
    """Build the encoder-input layout for a fusion mode.

    hybrid is [all, each single modality]; hybrid_star is [all, each
    (N-1)-subset ordered by excluded modality]; early is [all]; middle is
    the singletons only.
    """
    if n < 1:
        raise ShapeError(f"fusion spec requires n >= 1, got {n}")
    full = tuple(range(1, n + 1))
    if mode == "early":
        entries = [full]
    elif mode == "middle":
        entries = [(i,) for i in full]
    elif mode == "hybrid":
        entries = [full] + [(i,) for i in full]
    elif mode == "hybrid_star":
        if n < 2:
            raise ShapeError("hybrid_star requires n >= 2")
        entries = [full] + [tuple(j for j in full if j != i) for i in full]
    elif mode == "custom":
        if not custom:
            raise ShapeError("custom fusion mode requires a nonempty subset list")
        entries = []
        for subset in custom:
            s = tuple(sorted(int(i) for i in subset))
            if not s or len(set(s)) != len(s) or s[0] < 1 or s[-1] > n:
                raise ShapeError(f"custom subset {subset} outside modalities 1..{n}")
            entries.append(s)
    else:
        raise ShapeError(f"unknown fusion mode {mode!r}")
    return FusionSpec(tuple(entries))


@dataclass
class ModelConfig:
    """Architecture hyperparameters; extents must be multiples of 16."""

    n: int = 2
    fusion_mode: str = "hybrid"
    num_classes: int = 4
    extents: tuple[int, int, int] = (32, 32, 32)
    base_width: int = 8
    k_channels: int = 16
    embed_dim: int = 48
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    seed: int = 0
    custom_subsets: tuple[tuple[int, ...], ...] | None = None

    def validate(self) -> None:
        w, h, d = self.extents
        for name, v in (("width", w), ("height", h), ("depth", d)):
            if v < 16 or v % 16:
                raise ShapeError(f"{name} {v} must be a positive multiple of 16")
        if self.embed_dim % self.num_heads:
            raise ShapeError(
                f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.num_classes < 2:
            raise ShapeError("num_classes must be at least 2")
        if min(self.base_width, self.k_channels, self.embed_dim,
               self.num_heads, self.mlp_ratio) < 1 or self.num_layers < 0:
            raise ShapeError("width/depth hyperparameters must be positive")
        self.fusion_spec()  # raises on bad mode / subsets

    def fusion_spec(self) -> FusionSpec:
        return make_fusion_spec(self.fusion_mode, self.n, self.custom_subsets)

    def token_grid(self) -> tuple[int, int, int]:
        w, h, d = self.extents
        return (w // 16, h // 16, d // 16)

    def tokens_per_encoder(self) -> int:
        return math.prod(self.token_grid())

    def num_tokens(self) -> int:
        return self.fusion_spec().num_encoders * self.tokens_per_encoder()

    def to_text(self) -> str:
        lines = [
            f"n = {self.n}",
            f"fusion_mode = {self.fusion_mode}",
            f"num_classes = {self.num_classes}",
            f"width = {self.extents[0]}",
            f"height = {self.extents[1]}",
            f"depth = {self.extents[2]}",
            f"base_width = {self.base_width}",
            f"k_channels = {self.k_channels}",
            f"embed_dim = {self.embed_dim}",
            f"num_layers = {self.num_layers}",
            f"num_heads = {self.num_heads}",
            f"mlp_ratio = {self.mlp_ratio}",
            f"seed = {self.seed}",
        ]
        if self.custom_subsets is not None:
            subs = "|".join(",".join(str(i) for i in s) for s in self.custom_subsets)
            lines.append(f"custom_subsets = {subs}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CheckpointError(f"bad config line {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            fields[key] = value
        ints = {k: int(fields.pop(k)) for k in (
            "n", "num_classes", "width", "height", "depth", "base_width",
            "k_channels", "embed_dim", "num_layers", "num_heads",
            "mlp_ratio", "seed") if k in fields}
        mode = fields.pop("fusion_mode", "hybrid")
        custom = None
        if "custom_subsets" in fields:
            custom = tuple(
                tuple(int(i) for i in part.split(","))
                for part in fields.pop("custom_subsets").split("|"))
        if fields:
            raise CheckpointError(f"unknown config keys: {sorted(fields)}")
        cfg = cls(
            n=ints.get("n", 2),
            fusion_mode=mode,
            num_classes=ints.get("num_classes", 4),
            extents=(ints.get("width", 32), ints.get("height", 32),
                     ints.get("depth", 32)),
            base_width=ints.get("base_width", 8),
            k_channels=ints.get("k_channels", 16),
            embed_dim=ints.get("embed_dim", 48),
            num_layers=ints.get("num_layers", 4),
            num_heads=ints.get("num_heads", 4),
            mlp_ratio=ints.get("mlp_ratio", 4),
            seed=ints.get("seed", 0),
            custom_subsets=custom,
        )
        cfg.validate()
        return cfg


@dataclass
class EncoderOutput:
    """1/8-scale feature map plus the skip features at scales 1, 1/2, 1/4."""

    f: Tensor
    skips: list[Tensor]


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _encoder_layer_plan(cin: int, bw: int, k_channels: int):
    """(cout, cin, stride) per conv of one encoder; skips follow convs 0/2/4."""
    return [
        (bw, cin, 1),
        (2 * bw, bw, 2),
        (2 * bw, 2 * bw, 1),
        (4 * bw, 2 * bw, 2),
        (4 * bw, 4 * bw, 1),
        (k_channels, 4 * bw, 2),
    ]


def _decoder_plan(config: ModelConfig, num_encoders: int):
    """(deconv cin->cout, conv cin->cout) per stage, coarse to fine."""
    bw = config.base_width
    e = num_encoders
    ec = e * config.embed_dim
    k = config.k_channels
    return [
        (ec, ec, ec, k),                              # /16 -> /8
        (k, 4 * bw, 4 * bw + e * 4 * bw, 4 * bw),     # /8 -> /4, + skips
        (4 * bw, 2 * bw, 2 * bw + e * 2 * bw, 2 * bw),
        (2 * bw, bw, bw + e * bw, bw),
    ]


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Fan-in-scaled uniform weights, zero biases, unit norm gains.

    Draw order is fixed (encoders, patch projector, positional embedding,
    transformer layers, decoder) so a config seed fully determines every
    array.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def conv(name, cout, cin, k):
        params[f"{name}.w"] = uniform((cout, cin, k, k, k), cin * k ** 3)
        params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    def deconv(name, cin, cout, k):
        params[f"{name}.w"] = uniform((cin, cout, k, k, k), cin)
        params[f"{name}.b"] = np.zeros(cout, dtype=np.float32)

    def norm(name, c):
        params[f"{name}.gamma"] = np.ones(c, dtype=np.float32)
        params[f"{name}.beta"] = np.zeros(c, dtype=np.float32)

    def dense(name, dout, din):
        params[f"{name}.w"] = uniform((dout, din), din)
        params[f"{name}.b"] = np.zeros(dout, dtype=np.float32)

    spec = config.fusion_spec()
    for e, subset in enumerate(spec.encoder_inputs):
        plan = _encoder_layer_plan(len(subset), config.base_width, config.k_channels)
        for i, (cout, cin, _) in enumerate(plan):
            conv(f"enc{e}.conv{i}", cout, cin, 3)
            norm(f"enc{e}.norm{i}", cout)

    c = config.embed_dim
    dense("patch", c, config.k_channels * 8)
    params["pos.E"] = rng.uniform(
        -0.02, 0.02, size=(config.num_tokens(), c)).astype(np.float32)

    for layer in range(config.num_layers):
        pre = f"tf{layer}."
        norm(pre + "ln1", c)
        for proj in ("q", "k", "v", "o"):
            dense(pre + proj, c, c)
        norm(pre + "ln2", c)
        dense(pre + "mlp1", config.mlp_ratio * c, c)
        dense(pre + "mlp2", c, config.mlp_ratio * c)

    for s, (up_in, up_out, conv_in, conv_out) in enumerate(
            _decoder_plan(config, spec.num_encoders)):
        deconv(f"dec.up{s}", up_in, up_out, 2)
        conv(f"dec.conv{s}", conv_out, conv_in, 3)
        norm(f"dec.norm{s}", conv_out)
    conv("dec.head", config.num_classes, config.base_width, 1)
    return params


def bind_params(tape: ad.Tape | None,
                params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    """Leaves on a tape for training, constants when tape is None."""
    if tape is None:
        return {k: ad.constant(v) for k, v in params.items()}
    return {k: tape.leaf(v) for k, v in params.items()}


def count_parameters(params: dict) -> int:
    """Exact number of scalar parameters."""
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _conv_block(x: Tensor, params: dict[str, Tensor], conv_name: str,
                norm_name: str, stride: int, use_norm: bool) -> Tensor:
    y = ad.conv3d(x, params[conv_name + ".w"], params[conv_name + ".b"],
                  stride=stride, padding=1)
    if use_norm:
        y = ad.instance_norm(y, params[norm_name + ".gamma"],
                             params[norm_name + ".beta"])
    return ad.relu(y)


def encoder_forward(x: Tensor, params: dict[str, Tensor], prefix: str = "",
                    use_norm: bool = True) -> EncoderOutput:
    """Three stride-2 stages; channel widths bw, 2bw, 4bw, then K at 1/8."""
    if x.ndim != 4:
        raise ShapeError(f"encoder input must be (Cin, W, H, D), got {x.shape}")
    if any(v % 8 for v in x.shape[1:]):
        raise ShapeError(f"encoder extents {x.shape[1:]} must be divisible by 8")

    def block(t, i, stride):
        return _conv_block(t, params, f"{prefix}conv{i}", f"{prefix}norm{i}",
                           stride, use_norm)

    s0 = block(x, 0, 1)
    t = block(s0, 1, 2)
    s1 = block(t, 2, 1)
    t = block(s1, 3, 2)
    s2 = block(t, 4, 1)
    f = block(s2, 5, 2)
    return EncoderOutput(f=f, skips=[s0, s1, s2])


def patch_embed_and_position(f_list: Sequence[Tensor],
                             params: dict[str, Tensor]) -> Tensor:
    """2x2x2 patches of each encoder's f, projected to C and concatenated
    encoder-major; each patch flattens channel-major then local offset,
    patches ordered row-major over the token grid."""
    if not f_list:
        raise ShapeError("patch embedding requires at least one feature map")
    tokens = []
    ref_shape = f_list[0].shape
    for f in f_list:
        if f.shape != ref_shape:
            raise ShapeError(
                f"feature maps disagree: {f.shape} vs {ref_shape}")
        k, a, b, c = f.shape
        if a % 2 or b % 2 or c % 2:
            raise ShapeError(f"feature extents {f.shape[1:]} must be even")
        grid = (a // 2, b // 2, c // 2)
        r = ad.reshape(f, (k, grid[0], 2, grid[1], 2, grid[2], 2))
        p = ad.permute(r, (1, 3, 5, 0, 2, 4, 6))
        flat = ad.reshape(p, (math.prod(grid), k * 8))
        tokens.append(ad.linear(flat, params["patch.w"], params["patch.b"]))
    z0 = ad.concat(tokens, axis=0)
    pos = params["pos.E"]
    if pos.shape != z0.shape:
        raise ShapeError(
            f"positional embedding {pos.shape} does not match tokens {z0.shape}")
    return ad.add(z0, pos)


def msa(z: Tensor, params: dict[str, Tensor], prefix: str = "",
        num_heads: int = 1) -> Tensor:
    """Global multihead self-attention across all tokens of all encoders."""
    m, c = z.shape
    if c % num_heads:
        raise ShapeError(f"embed dim {c} not divisible by {num_heads} heads")
    dh = c // num_heads

    def heads(t):  # (M, C) -> (h, M, dh)
        return ad.permute(ad.reshape(t, (m, num_heads, dh)), (1, 0, 2))

    q = heads(ad.linear(z, params[prefix + "q.w"], params[prefix + "q.b"]))
    k = heads(ad.linear(z, params[prefix + "k.w"], params[prefix + "k.b"]))
    v = heads(ad.linear(z, params[prefix + "v.w"], params[prefix + "v.b"]))
    scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = ad.softmax(scores, axis=-1)
    mixed = ad.reshape(ad.permute(ad.matmul(att, v), (1, 0, 2)), (m, c))
    return ad.linear(mixed, params[prefix + "o.w"], params[prefix + "o.b"])


def transformer_layer(z: Tensor, params: dict[str, Tensor], prefix: str = "",
                      num_heads: int = 1) -> Tensor:
    """Pre-norm residual pair: attention sublayer then MLP sublayer."""
    zn = ad.layer_norm(z, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"])
    zs = ad.add(msa(zn, params, prefix, num_heads), z)
    zn2 = ad.layer_norm(zs, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"])
    hidden = ad.gelu(ad.linear(zn2, params[prefix + "mlp1.w"],
                               params[prefix + "mlp1.b"]))
    out = ad.linear(hidden, params[prefix + "mlp2.w"], params[prefix + "mlp2.b"])
    return ad.add(out, zs)


def transformer_encoder(z0: Tensor, params: dict[str, Tensor], num_layers: int,
                        num_heads: int, prefix: str = "tf") -> Tensor:
    z = z0
    for layer in range(num_layers):
        z = transformer_layer(z, params, f"{prefix}{layer}.", num_heads)
    return z


def decoder_forward(zL: Tensor, skips: Sequence[Sequence[Tensor]],
                    params: dict[str, Tensor], config: ModelConfig,
                    use_norm: bool = True) -> Tensor:
    """Tokens back to full-resolution logits.

    zL is split per encoder and reshaped to (C, W/16, H/16, D/16) maps,
    concatenated channel-wise, then upsampled through four stride-2 stages;
    the three fine stages concatenate the same-scale skips of every encoder
    before their 3x3x3 conv. Returns pre-softmax logits.
    """
    e = len(skips)
    grid = config.token_grid()
    m = math.prod(grid)
    c = config.embed_dim
    if zL.shape != (e * m, c):
        raise ShapeError(f"token matrix {zL.shape} does not match "
                         f"{e} encoders x {m} tokens x {c}")
    maps = []
    for enc in range(e):
        chunk = ad.slice_axis(zL, 0, enc * m, (enc + 1) * m)
        vol = ad.permute(ad.reshape(chunk, grid + (c,)), (3, 0, 1, 2))
        maps.append(vol)
    x = ad.concat(maps, axis=0)

    bw = config.base_width
    skip_widths = (bw, 2 * bw, 4 * bw)
    for enc_skips in skips:
        if len(enc_skips) != 3:
            raise ShapeError("each encoder must provide skips at scales 1, 1/2, 1/4")
        for scale, sk in enumerate(enc_skips):
            expect = tuple(v >> scale for v in config.extents)
            if sk.shape != (skip_widths[scale],) + expect:
                raise ShapeError(
                    f"skip at scale 1/{1 << scale} has shape {sk.shape}, "
                    f"expected {(skip_widths[scale],) + expect}")

    def stage(t, s, extra):
        t = ad.conv_transpose3d(t, params[f"dec.up{s}.w"],
                                params[f"dec.up{s}.b"], stride=2)
        if extra:
            t = ad.concat([t] + extra, axis=0)
        return _conv_block(t, params, f"dec.conv{s}", f"dec.norm{s}", 1, use_norm)

    x = stage(x, 0, [])
    for s in (1, 2, 3):
        same_scale = [skips[enc][3 - s] for enc in range(e)]
        x = stage(x, s, same_scale)
    return ad.conv3d(x, params["dec.head.w"], params["dec.head.b"],
                     stride=1, padding=0)


def model_forward(x: Tensor, config: ModelConfig, params: dict[str, Tensor],
                  use_norm: bool = True) -> Tensor:
    """Full pass: fusion routing, encoders, token fusion, decoding, softmax."""
    config.validate()
    if x.shape != (config.n,) + tuple(config.extents):
        raise ShapeError(f"input {x.shape} does not match "
                         f"({config.n},) + {config.extents}")
    spec = config.fusion_spec()
    outputs = []
    for e, subset in enumerate(spec.encoder_inputs):
        idx = [i - 1 for i in subset]
        if idx == list(range(idx[0], idx[-1] + 1)):
            xe = ad.slice_axis(x, 0, idx[0], idx[-1] + 1)
        else:
            xe = ad.concat([ad.slice_axis(x, 0, i, i + 1) for i in idx], axis=0)
        outputs.append(encoder_forward(xe, params, f"enc{e}.", use_norm))
    z0 = patch_embed_and_position([o.f for o in outputs], params)
    zL = transformer_encoder(z0, params, config.num_layers, config.num_heads)
    logits = decoder_forward(zL, [o.skips for o in outputs], params, config,
                             use_norm)
    return ad.softmax(logits, axis=0)


def forward_inference(x: np.ndarray, config: ModelConfig,
                      params: dict[str, np.ndarray],
                      use_norm: bool = True) -> np.ndarray:
    """Tape-free forward for evaluation; returns a probability array."""
    bound = bind_params(None, params)
    probs = model_forward(ad.constant(x), config, bound, use_norm)
    return probs.data


# ---------------------------------------------------------------------------
# analytic cost model
# ---------------------------------------------------------------------------

def estimate_flops(config: ModelConfig) -> int:
    """Multiply-accumulate count of one forward pass.

    Convs cost Cout*Cin*k^3 per output voxel, deconvs Cin*Cout*k^3 per input
    voxel, attention 2*M^2*C per layer plus its projections. Normalization,
    softmax, and residual adds are not counted.
    """
    config.validate()
    spec = config.fusion_spec()
    w, h, d = config.extents
    v1 = w * h * d
    v2, v4, v8 = v1 // 8, v1 // 64, v1 // 512
    bw, k = config.base_width, config.k_channels
    c, ratio = config.embed_dim, config.mlp_ratio

    total = 0
    for subset in spec.encoder_inputs:
        plan = _encoder_layer_plan(len(subset), bw, k)
        vols = (v1, v2, v2, v4, v4, v8)
        for (cout, cin, _), vol in zip(plan, vols):
            total += cout * cin * 27 * vol

    m = config.tokens_per_encoder()
    big_m = spec.num_encoders * m
    total += big_m * c * (k * 8)  # patch projection
    per_layer = 4 * big_m * c * c + 2 * big_m * big_m * c \
        + 2 * big_m * c * (ratio * c)
    total += config.num_layers * per_layer

    stage_in_vols = (m, v8, v4, v2)
    conv_vols = (v8, v4, v2, v1)
    for (up_in, up_out, conv_in, conv_out), vin, vconv in zip(
            _decoder_plan(config, spec.num_encoders), stage_in_vols, conv_vols):
        total += up_in * up_out * 8 * vin
        total += conv_out * conv_in * 27 * vconv
    total += config.num_classes * bw * v1  # 1x1x1 head
    return total


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(path, config: ModelConfig,
                    params: dict[str, np.ndarray]) -> None:
    """Little-endian binary: magic, version, config text, sorted parameters."""
    blob = config.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version = struct.unpack("<B", _read_exact(fh, 1))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        blob_len = struct.unpack("<I", _read_exact(fh, 4))[0]
        config = ModelConfig.from_text(_read_exact(fh, blob_len).decode("utf-8"))
        count = struct.unpack("<I", _read_exact(fh, 4))[0]
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2))[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            rank = struct.unpack("<B", _read_exact(fh, 1))[0]
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = int(math.prod(shape)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * size), dtype="<f4")
            params[name] = data.reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after last parameter")
    return config, params
