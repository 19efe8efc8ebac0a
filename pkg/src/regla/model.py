"""Four-stage hybrid network: convolutional early stages, RGMA late stages."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import blocks as B
from .attention import DEFAULT_EPSILON, GateVariant
from .errors import ConfigurationError
from .init import INIT_STD, ones, trunc_normal, zeros

# variant -> (blocks per stage, channels per stage, reported parameter count in millions)
VARIANTS: dict[str, tuple[tuple[int, ...], tuple[int, ...], float]] = {
    "T": ((2, 2, 16, 6), (32, 64, 128, 256), 3.8),
    "S": ((2, 2, 19, 6), (32, 64, 160, 320), 6.4),
    "M": ((2, 2, 22, 6), (48, 96, 192, 384), 9.6),
    "L": ((3, 3, 31, 9), (64, 128, 256, 448), 19.9),
    "X": ((4, 4, 43, 12), (64, 128, 336, 512), 39.8),
}

STAGE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "M"
    blocks: tuple[int, ...] = VARIANTS["M"][0]
    channels: tuple[int, ...] = VARIANTS["M"][1]
    gate_variant: GateVariant = GateVariant.GATE_FULL
    post_attn: str = "Conv3"
    ffn_expansion: float = 2.0
    early_stage_kind: str = "ELRF"
    num_classes: int = 1000
    # hidden width of the pooled MLP classifier, as a multiple of the last stage width
    head_hidden_ratio: float = 2.5
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "gate_variant", GateVariant.parse(self.gate_variant))
        if len(self.blocks) != 4 or len(self.channels) != 4:
            raise ConfigurationError("blocks and channels need exactly four entries")
        if min(self.blocks) < 1 or min(self.channels) < 1:
            raise ConfigurationError(f"blocks/channels must be positive: {self.blocks} {self.channels}")
        if self.post_attn not in B.POST_ATTENTION_KINDS:
            raise ConfigurationError(f"unknown post_attn {self.post_attn!r}")
        if self.early_stage_kind not in B.EARLY_STAGE_KINDS:
            raise ConfigurationError(f"unknown early_stage_kind {self.early_stage_kind!r}")
        if self.num_classes < 1 or self.head_hidden_ratio < 0 or not self.epsilon > 0:
            raise ConfigurationError("num_classes, head_hidden_ratio and epsilon must be positive")
        for c in self.channels:
            B.hidden_width(c, self.ffn_expansion)

    @classmethod
    def from_variant(cls, name: str, **overrides) -> "ModelConfig":
        key = str(name).upper()
        if key not in VARIANTS:
            raise ConfigurationError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
        blocks, channels, _ = VARIANTS[key]
        return cls(variant=key, blocks=blocks, channels=channels, **overrides)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @property
    def head_hidden(self) -> int:
        return int(round(self.head_hidden_ratio * self.channels[3]))


def stage_resolutions(resolution: int) -> list[int]:
    return [resolution // s for s in STAGE_STRIDES]


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(repr=False)

    def forward(self, x):
        return forward(self, x)

    def named_parameters(self) -> dict[str, np.ndarray]:
        return flatten_params(self.params)

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Overwrite weights from a flat ``name -> array`` mapping (shapes must match)."""
        current = self.named_parameters()
        missing = sorted(set(current) - set(state))
        if missing:
            raise KeyError(missing[0])
        for name, arr in current.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ConfigurationError(f"{name}: shape {src.shape} != {arr.shape}")
            arr[...] = src


def flatten_params(tree, prefix: str = "") -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    items = tree.items() if isinstance(tree, dict) else enumerate(tree)
    for k, v in items:
        name = f"{prefix}{k}"
        if isinstance(v, (dict, list)):
            out.update(flatten_params(v, name + "."))
        elif v is not None:
            out[name] = v
    return out


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Initialise a network: truncated-normal(0.02) weights, zero biases."""
    rng = np.random.default_rng(seed)
    c = config.channels
    r = config.ffn_expansion
    params: dict = {"stem": B.init_stem(c[0], rng=rng, dtype=dtype), "stages": []}
    for i in range(4):
        stage: dict = {"downsample": None if i == 0 else B.init_downsample(c[i - 1], c[i], rng, dtype)}
        if i < 2:
            stage["blocks"] = [B.init_early_block(config.early_stage_kind, c[i], r, rng, dtype)
                               for _ in range(config.blocks[i])]
        else:
            stage["blocks"] = [B.init_rgma_block(c[i], config.post_attn, r, rng, dtype)
                               for _ in range(config.blocks[i])]
        params["stages"].append(stage)

    head: dict = {"norm_gamma": ones((c[3],), dtype), "norm_beta": zeros((c[3],), dtype)}
    if config.head_hidden:
        head["fc1_w"] = trunc_normal(rng, (c[3], config.head_hidden), INIT_STD, dtype)
        head["fc1_b"] = zeros((config.head_hidden,), dtype)
        fc_in = config.head_hidden
    else:
        fc_in = c[3]
    head["fc_w"] = trunc_normal(rng, (fc_in, config.num_classes), INIT_STD, dtype)
    head["fc_b"] = zeros((config.num_classes,), dtype)
    params["head"] = head
    return Model(config, params)


def forward(model: Model, x):
    """Run the network on one ``(3, H, W)`` image.

    Returns ``(logits, stage_features)`` where ``stage_features[i]`` is the
    output of stage ``i + 1`` at stride ``4 * 2**i``.
    """
    cfg = model.config
    if x.ndim != 3 or x.shape[0] != 3:
        raise ConfigurationError(f"expected a (3, H, W) image, got {tuple(x.shape)}")
    if x.shape[1] % 32 or x.shape[2] % 32:
        raise ConfigurationError(f"input size {x.shape[1]}x{x.shape[2]} is not divisible by 32")

    p = model.params
    h = B.stem(x, p["stem"])
    features = []
    for i, stage in enumerate(p["stages"]):
        if stage["downsample"] is not None:
            h = B.downsample(h, stage["downsample"])
        for w in stage["blocks"]:
            if i < 2:
                h = B.early_block(h, w, cfg.early_stage_kind)
            else:
                h = B.rgma_block(h, w, cfg.gate_variant, cfg.post_attn, cfg.epsilon)
        features.append(h)
    return classify(h, p["head"]), features


def classify(h, head: dict):
    """Global average pool, layer norm, optional hidden layer, linear classifier."""
    c = h.shape[0]
    pooled = ad.reshape(ad.adaptive_avg_pool(h, 1, 1), (1, c))
    z = ad.layer_norm(pooled, axis=1, gamma=head["norm_gamma"], beta=head["norm_beta"])
    if "fc1_w" in head:
        z = ad.gelu(ad.add(ad.matmul(z, head["fc1_w"]), head["fc1_b"]))
    logits = ad.add(ad.matmul(z, head["fc_w"]), head["fc_b"])
    return ad.reshape(logits, (logits.shape[1],))


def count_params(model: Model) -> tuple[int, dict[str, int]]:
    """Total learnable scalars and a breakdown over stem / stage1..4 / head."""
    p = model.params
    breakdown = {"stem": B.count_params(p["stem"])}
    for i, stage in enumerate(p["stages"]):
        breakdown[f"stage{i + 1}"] = B.count_params({k: v for k, v in stage.items() if v is not None})
    breakdown["head"] = B.count_params(p["head"])
    return sum(breakdown.values()), breakdown
