"""Image and text towers of the two-tower model.

The image tower is either a pre-norm vision transformer over square patches
with a class token, or a small strided conv net with batch norm and global
average pooling. The text tower is a pre-norm transformer over byte tokens
that pools the hidden state of the first (begin) token. Each tower ends in a
linear projection to the shared embedding space followed by L2
normalization. The temperature is a learnable scalar kept in log space.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ContractViolation, Tensor

KINDS = ("patch_transformer", "conv_net", "text_transformer")
PART_NAMES = ("image_tower", "text_tower", "image_projection", "text_projection", "logit_scale")

INIT_LOGIT_SCALE = math.log(1.0 / 0.07)
PROJECTION_STD = 0.02
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25
PAD_ID = 0
MASK_VALUE = -1e9


class IncompatibleCheckpoint(ValueError):
    """A checkpoint tensor cannot be placed into the requested model."""


@dataclass(frozen=True)
class EncoderConfig:
    kind: str
    layers: int
    width: int
    heads: int
    embed_dim: int = 32
    patch_size: int = 0
    resolution: int = 0
    vocab_size: int = 0
    max_text_length: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown encoder kind {self.kind!r}")
        if self.layers < 1 or self.width < 1 or self.heads < 1 or self.embed_dim < 1:
            raise ContractViolation("layers, width, heads and embed_dim must be positive")
        if self.width % self.heads:
            raise ContractViolation(f"width {self.width} not divisible by heads {self.heads}")
        if self.kind == "text_transformer":
            if self.vocab_size < 1 or self.max_text_length < 2:
                raise ContractViolation("text tower needs vocab_size and max_text_length")
        else:
            if self.patch_size < 1 or self.resolution < 1:
                raise ContractViolation("image tower needs patch_size and resolution")
            if self.resolution % self.patch_size:
                raise ContractViolation(
                    f"resolution {self.resolution} not divisible by patch_size {self.patch_size}"
                )
        if self.kind == "conv_net" and self.grid % (2 ** (self.layers - 1)):
            raise ContractViolation("conv_net grid must halve cleanly at every layer")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch_size if self.patch_size else 0

    def to_items(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "EncoderConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in items:
                kwargs[f.name] = items[f.name] if f.name == "kind" else int(items[f.name])
        return cls(**kwargs)


def default_text_config(**overrides) -> EncoderConfig:
    base = dict(kind="text_transformer", layers=2, width=64, heads=4, embed_dim=32,
                vocab_size=512, max_text_length=50)
    base.update(overrides)
    return EncoderConfig(**base)


def default_image_config(**overrides) -> EncoderConfig:
    base = dict(kind="patch_transformer", layers=2, width=64, heads=4, embed_dim=32,
                patch_size=8, resolution=32)
    base.update(overrides)
    return EncoderConfig(**base)


def default_conv_config(**overrides) -> EncoderConfig:
    base = dict(kind="conv_net", layers=3, width=32, heads=1, embed_dim=32,
                patch_size=4, resolution=32)
    base.update(overrides)
    return EncoderConfig(**base)


def param_group(name: str) -> str:
    """Map a parameter name to its freezable group."""
    if name.startswith("image."):
        return "image_tower"
    if name.startswith("text."):
        return "text_tower"
    return name


# ---------------------------------------------------------------------------
# parameter layout


def _transformer_shapes(prefix: str, width: int, layers: int) -> list[tuple[str, tuple, str]]:
    """(name, shape, init) for a stack of pre-norm blocks."""
    out = []
    for i in range(layers):
        b = f"{prefix}.blocks.{i}"
        out += [
            (f"{b}.ln1.gain", (width,), "ones"),
            (f"{b}.ln1.bias", (width,), "zeros"),
            (f"{b}.attn.qkv.weight", (width, 3 * width), f"normal:{width ** -0.5}"),
            (f"{b}.attn.qkv.bias", (3 * width,), "zeros"),
            (f"{b}.attn.out.weight", (width, width), f"normal:{(width * 2 * layers) ** -0.5}"),
            (f"{b}.attn.out.bias", (width,), "zeros"),
            (f"{b}.ln2.gain", (width,), "ones"),
            (f"{b}.ln2.bias", (width,), "zeros"),
            (f"{b}.mlp.fc.weight", (width, 4 * width), f"normal:{(2 * width) ** -0.5}"),
            (f"{b}.mlp.fc.bias", (4 * width,), "zeros"),
            (f"{b}.mlp.proj.weight", (4 * width, width), f"normal:{(4 * width * 2 * layers) ** -0.5}"),
            (f"{b}.mlp.proj.bias", (width,), "zeros"),
        ]
    return out


def parameter_layout(image: EncoderConfig, text: EncoderConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init) triples for every trainable tensor."""
    if text.kind != "text_transformer" or image.kind == "text_transformer":
        raise ContractViolation("need one image config and one text config")
    if image.embed_dim != text.embed_dim:
        raise ContractViolation("towers disagree on embed_dim")
    w = image.width
    layout: list[tuple[str, tuple, str]] = []
    if image.kind == "patch_transformer":
        p = image.patch_size
        layout += [
            ("image.patch_embed", (p * p * 3, w), f"normal:{(p * p * 3) ** -0.5}"),
            ("image.class_embedding", (w,), f"normal:{w ** -0.5}"),
            ("image.positional_embedding", (image.grid ** 2 + 1, w), f"normal:{w ** -0.5}"),
            ("image.ln_pre.gain", (w,), "ones"),
            ("image.ln_pre.bias", (w,), "zeros"),
        ]
        layout += _transformer_shapes("image", w, image.layers)
        layout += [("image.ln_post.gain", (w,), "ones"), ("image.ln_post.bias", (w,), "zeros")]
    else:
        fan_in = image.patch_size ** 2 * 3
        for i in range(image.layers):
            layout += [
                (f"image.conv{i}.weight", (fan_in, w), f"normal:{fan_in ** -0.5}"),
                (f"image.bn{i}.gain", (w,), "ones"),
                (f"image.bn{i}.bias", (w,), "zeros"),
            ]
            fan_in = 4 * w
    tw = text.width
    layout += [
        ("text.token_embedding", (text.vocab_size, tw), "normal:0.02"),
        ("text.positional_embedding", (text.max_text_length, tw), "normal:0.01"),
    ]
    layout += _transformer_shapes("text", tw, text.layers)
    layout += [("text.ln_final.gain", (tw,), "ones"), ("text.ln_final.bias", (tw,), "zeros")]
    layout += [
        ("image_projection", (w, image.embed_dim), f"normal:{PROJECTION_STD}"),
        ("text_projection", (tw, text.embed_dim), f"normal:{PROJECTION_STD}"),
        ("logit_scale", (), "logit_scale"),
    ]
    return layout


def _init_array(rng: np.random.Generator, shape: tuple, rule: str) -> np.ndarray:
    if rule == "ones":
        return np.ones(shape)
    if rule == "zeros":
        return np.zeros(shape)
    if rule == "logit_scale":
        return np.array(INIT_LOGIT_SCALE)
    std = float(rule.split(":")[1])
    return rng.normal(0.0, std, size=shape)


class TwoTowerModel:
    """Parameters plus batch-norm state of both towers."""

    def __init__(self, image_config: EncoderConfig, text_config: EncoderConfig,
                 params: dict[str, Tensor], bn_states: dict[str, BatchNormState]):
        self.image_config = image_config
        self.text_config = text_config
        self.params = params
        self.bn_states = bn_states

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def embed_dim(self) -> int:
        return self.image_config.embed_dim

    @property
    def temperature(self) -> float:
        return math.exp(self.params["logit_scale"].item())

    def group_params(self, group: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if param_group(n) == group}

    def set_trainable(self, frozen_groups=()) -> None:
        frozen = set(frozen_groups)
        for name, p in self.params.items():
            p.requires_grad = param_group(name) not in frozen

    def copy(self) -> "TwoTowerModel":
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                  for n, p in self.params.items()}
        states = {n: BatchNormState(s.running_mean.copy(), s.running_var.copy(), s.momentum,
                                    s.update_stats, s.eps)
                  for n, s in self.bn_states.items()}
        return TwoTowerModel(self.image_config, self.text_config, params, states)


def random_model(image_config: EncoderConfig, text_config: EncoderConfig, seed: int) -> TwoTowerModel:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, rule in parameter_layout(image_config, text_config):
        params[name] = Tensor(_init_array(rng, shape, rule), requires_grad=True, name=name)
    states = {}
    if image_config.kind == "conv_net":
        for i in range(image_config.layers):
            states[f"image.bn{i}"] = BatchNormState.fresh(image_config.width)
    return TwoTowerModel(image_config, text_config, params, states)


# ---------------------------------------------------------------------------
# forward passes


def _transformer(x: Tensor, model: TwoTowerModel, prefix: str, cfg: EncoderConfig,
                 mask: np.ndarray | None) -> Tensor:
    p = model.params
    B, L, W = x.shape
    H = cfg.heads
    D = W // H
    for i in range(cfg.layers):
        b = f"{prefix}.blocks.{i}"
        h = T.layer_norm(x, p[f"{b}.ln1.gain"], p[f"{b}.ln1.bias"])
        qkv = (h @ p[f"{b}.attn.qkv.weight"] + p[f"{b}.attn.qkv.bias"])
        qkv = qkv.reshape(B, L, 3, H, D).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(D))
        if mask is not None:
            att = att + mask
        att = T.softmax(att, axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, L, W)
        x = x + (o @ p[f"{b}.attn.out.weight"] + p[f"{b}.attn.out.bias"])
        h = T.layer_norm(x, p[f"{b}.ln2.gain"], p[f"{b}.ln2.bias"])
        h = T.gelu(h @ p[f"{b}.mlp.fc.weight"] + p[f"{b}.mlp.fc.bias"])
        x = x + (h @ p[f"{b}.mlp.proj.weight"] + p[f"{b}.mlp.proj.bias"])
    return x


def text_features(model: TwoTowerModel, token_ids, mask=None) -> Tensor:
    """Unnormalized projected first-token states, shape (B, embed_dim)."""
    cfg = model.text_config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, L = ids.shape
    if L > cfg.max_text_length:
        raise ContractViolation(f"sequence length {L} exceeds max_text_length {cfg.max_text_length}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractViolation(f"token id out of range [0, {cfg.vocab_size})")
    keep = (ids != PAD_ID) if mask is None else np.asarray(mask, dtype=bool).reshape(B, L)
    additive = np.where(keep, 0.0, MASK_VALUE)[:, None, None, :]
    p = model.params
    x = T.embedding(p["text.token_embedding"], ids) + p["text.positional_embedding"][:L]
    x = _transformer(x, model, "text", cfg, additive)
    first = x[:, 0, :]
    first = T.layer_norm(first, p["text.ln_final.gain"], p["text.ln_final.bias"])
    return first @ p["text_projection"]


def encode_texts(model: TwoTowerModel, token_ids, mask=None) -> Tensor:
    return T.l2_normalize(text_features(model, token_ids, mask), axis=-1)


def encode_text(model: TwoTowerModel, token_ids, mask=None) -> np.ndarray:
    """Unit embedding of one padded id sequence."""
    with T.no_grad():
        return encode_texts(model, np.asarray(token_ids)[None, :],
                            None if mask is None else np.asarray(mask)[None, :]).data[0]


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(B, R, R, 3) -> (B, g*g, patch*patch*3), patches in row-major grid order."""
    B, R, _, C = pixels.shape
    g = R // patch
    x = pixels.reshape(B, g, patch, g, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g * g, patch * patch * C)


def _check_pixels(cfg: EncoderConfig, pixels) -> np.ndarray:
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != (cfg.resolution, cfg.resolution, 3):
        raise ContractViolation(
            f"expected images of shape ({cfg.resolution}, {cfg.resolution}, 3), got {x.shape[1:]}"
        )
    return (x - IMAGE_MEAN) / IMAGE_STD


def _vit_features(model: TwoTowerModel, x: np.ndarray) -> Tensor:
    cfg = model.image_config
    p = model.params
    B = x.shape[0]
    tokens = Tensor(patchify(x, cfg.patch_size)) @ p["image.patch_embed"]
    cls = p["image.class_embedding"].reshape(1, 1, cfg.width) + np.zeros((B, 1, cfg.width))
    h = T.concatenate([cls, tokens], axis=1) + p["image.positional_embedding"]
    h = T.layer_norm(h, p["image.ln_pre.gain"], p["image.ln_pre.bias"])
    h = _transformer(h, model, "image", cfg, None)
    return T.layer_norm(h[:, 0, :], p["image.ln_post.gain"], p["image.ln_post.bias"])


def _conv_features(model: TwoTowerModel, x: np.ndarray, training: bool) -> Tensor:
    cfg = model.image_config
    p = model.params
    B = x.shape[0]
    g = cfg.grid
    h = Tensor(patchify(x, cfg.patch_size).reshape(B, g, g, -1))
    for i in range(cfg.layers):
        if i:
            g //= 2
            h = h.reshape(B, g, 2, g, 2, cfg.width).transpose(0, 1, 3, 2, 4, 5)
            h = h.reshape(B, g, g, 4 * cfg.width)
        h = h @ p[f"image.conv{i}.weight"]
        h = T.batch_norm(h, p[f"image.bn{i}.gain"], p[f"image.bn{i}.bias"],
                         model.bn_states[f"image.bn{i}"], training)
        h = T.gelu(h)
    return h.mean(axis=(1, 2))


def image_features(model: TwoTowerModel, pixels, training: bool = False) -> Tensor:
    """Unnormalized projected image features, shape (B, embed_dim).

    `training` only matters for the conv net: it selects batch statistics
    over running statistics in batch norm.
    """
    cfg = model.image_config
    x = _check_pixels(cfg, pixels)
    if cfg.kind == "patch_transformer":
        pooled = _vit_features(model, x)
    else:
        pooled = _conv_features(model, x, training)
    return pooled @ model.params["image_projection"]


def encode_images(model: TwoTowerModel, pixels, training: bool = False) -> Tensor:
    return T.l2_normalize(image_features(model, pixels, training), axis=-1)


def encode_image(model: TwoTowerModel, pixels) -> np.ndarray:
    """Unit embedding of one (R, R, 3) image with values in [0, 1]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3:
        raise ContractViolation(f"expected a single (R, R, 3) image, got shape {pixels.shape}")
    with T.no_grad():
        return encode_images(model, pixels[None]).data[0]


# ---------------------------------------------------------------------------
# positional embedding resampling


def _resample_axis(grid: np.ndarray, new: int, axis: int) -> np.ndarray:
    old = grid.shape[axis]
    if old == 1:
        return np.repeat(grid, new, axis=axis)
    if new == 1:
        coords = np.zeros(1)
    else:
        coords = np.arange(new) * ((old - 1) / (new - 1))
    lo = np.minimum(np.floor(coords).astype(int), old - 2)
    frac = coords - lo
    a = np.take(grid, lo, axis=axis)
    b = np.take(grid, lo + 1, axis=axis)
    shape = [1] * grid.ndim
    shape[axis] = new
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def interpolate_positional_embeddings(pos: np.ndarray, new_grid: int) -> np.ndarray:
    """Resample a (g*g + 1, width) table to (new_grid**2 + 1, width).

    Row 0 is the class slot and is copied. The remaining rows form a g x g
    grid that is resampled bilinearly with corner alignment.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if pos.ndim != 2:
        raise ContractViolation("positional table must be 2-D")
    if new_grid < 1:
        raise ContractViolation("new grid size must be at least 1")
    g = math.isqrt(pos.shape[0] - 1) if pos.shape[0] >= 2 else 0
    if g < 1 or g * g + 1 != pos.shape[0]:
        raise ContractViolation(f"{pos.shape[0]} rows is not a square grid plus a class slot")
    if new_grid == g:
        return pos.copy()
    grid = pos[1:].reshape(g, g, -1)
    grid = _resample_axis(_resample_axis(grid, new_grid, 0), new_grid, 1)
    return np.concatenate([pos[:1], grid.reshape(new_grid * new_grid, -1)], axis=0)


# ---------------------------------------------------------------------------
# initialization


def init_model(image_config: EncoderConfig, text_config: EncoderConfig, seed: int,
               checkpoint=None, parts=PART_NAMES) -> TwoTowerModel:
    """Build a model, optionally copying selected parts from a checkpoint.

    `checkpoint` is a bundle path or a loaded `Bundle`. Parts not selected
    keep their seeded random initialization. A positional table whose grid
    differs from the target is resampled; any other shape difference raises
    `IncompatibleCheckpoint` naming the tensor.
    """
    from .checkpoint import Bundle, load_bundle

    model = random_model(image_config, text_config, seed)
    if checkpoint is None:
        return model
    bundle = checkpoint if isinstance(checkpoint, Bundle) else load_bundle(checkpoint)
    wanted = set(parts)
    unknown = wanted - set(PART_NAMES)
    if unknown:
        raise ContractViolation(f"unknown parts {sorted(unknown)}")
    for name, target in model.params.items():
        if param_group(name) not in wanted:
            continue
        if name not in bundle.params:
            raise IncompatibleCheckpoint(f"checkpoint has no tensor {name!r}")
        src = bundle.params[name]
        if src.shape != target.shape:
            if name == "image.positional_embedding" and src.ndim == 2 and src.shape[1] == target.shape[1]:
                try:
                    src = interpolate_positional_embeddings(src, image_config.grid)
                except ContractViolation as exc:
                    raise IncompatibleCheckpoint(f"{name}: {exc}") from exc
            else:
                raise IncompatibleCheckpoint(
                    f"{name}: checkpoint shape {src.shape} vs model shape {target.shape}"
                )
        target.data = src.copy()
    if "image_tower" in wanted:
        for name, state in model.bn_states.items():
            if name not in bundle.bn_states:
                raise IncompatibleCheckpoint(f"checkpoint has no batch-norm state {name!r}")
            src = bundle.bn_states[name]
            if src.running_mean.shape != state.running_mean.shape:
                raise IncompatibleCheckpoint(f"{name}: batch-norm channel count differs")
            state.running_mean = src.running_mean.copy()
            state.running_var = src.running_var.copy()
    return model
