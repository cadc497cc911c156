"""Net1D-style backbone: stem conv, bottleneck blocks with grouped convs and
squeeze-excitation, global average pooling and a linear multi-label head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import engine as E
from .engine import ShapeError, Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BlockConfig:
    in_ch: int
    bottleneck_ch: int
    out_ch: int
    kernel: int = 7
    stride: int = 1
    groups: int = 4
    se_reduction: int = 4

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"block kernel must be odd, got {self.kernel}")
        if self.stride < 1 or self.se_reduction < 1:
            raise ValueError("stride and se_reduction must be >= 1")
        if self.bottleneck_ch % self.groups:
            raise ValueError(f"groups={self.groups} must divide bottleneck_ch={self.bottleneck_ch}")
        if self.out_ch // self.se_reduction < 1:
            raise ValueError("se_reduction leaves no hidden units")

    @property
    def identity_shortcut(self) -> bool:
        return self.in_ch == self.out_ch and self.stride == 1


def default_blocks() -> list[BlockConfig]:
    outs, strides = (16, 16, 32, 32), (2, 1, 2, 1)
    blocks, cin = [], 16
    for cout, s in zip(outs, strides):
        blocks.append(BlockConfig(cin, cout // 2, cout, kernel=7, stride=s, groups=4, se_reduction=4))
        cin = cout
    return blocks


@dataclass
class ModelConfig:
    n_leads: int = 12
    stem_ch: int = 16
    stem_kernel: int = 15
    stem_stride: int = 2
    blocks: list[BlockConfig] = field(default_factory=default_blocks)
    head_dim: int = 1

    def __post_init__(self):
        self.blocks = [b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks]
        cin = self.stem_ch
        for i, b in enumerate(self.blocks):
            if b.in_ch != cin:
                raise ValueError(f"block {i} expects {b.in_ch} input channels, previous layer gives {cin}")
            cin = b.out_ch

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1].out_ch if self.blocks else self.stem_ch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def tiny_config(n_leads=2, channels=4, n_blocks=2, head_dim=3) -> ModelConfig:
    """Small configuration used for gradient checks."""
    blocks = [BlockConfig(channels, channels, channels, kernel=3, stride=1 + (i % 2),
                          groups=2, se_reduction=2) for i in range(n_blocks)]
    return ModelConfig(n_leads=n_leads, stem_ch=channels, stem_kernel=5, stem_stride=2,
                       blocks=blocks, head_dim=head_dim)


class ModelParams:
    """Parameters, batch-norm running statistics and AdamW state."""

    def __init__(self, config: ModelConfig, params: dict, buffers: dict):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.opt_state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def copy(self) -> "ModelParams":
        out = ModelParams(copy.deepcopy(self.config),
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()})
        out.opt_state = {k: (m.copy(), v.copy()) for k, (m, v) in self.opt_state.items()}
        out.step = self.step
        return out

    def backbone_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def astype(self, dtype) -> "ModelParams":
        out = self.copy()
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        return out


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_params(rng, p, name, cout, cin_g, k, dtype):
    p[f"{name}.w"] = _kaiming_uniform(rng, (cout, cin_g, k), cin_g * k, dtype)
    p[f"{name}.b"] = np.zeros(cout, dtype=dtype)


def _bn_params(p, buf, name, c, dtype):
    p[f"{name}.gamma"] = np.ones(c, dtype=dtype)
    p[f"{name}.beta"] = np.zeros(c, dtype=dtype)
    buf[f"{name}.mean"] = np.zeros(c, dtype=np.float64)
    buf[f"{name}.var"] = np.ones(c, dtype=np.float64)


def init_head(rng, config: ModelConfig, head_dim: int, dtype=np.float32) -> dict:
    f = config.feature_dim
    return {"head.w": _kaiming_uniform(rng, (f, head_dim), f, dtype),
            "head.b": np.zeros(head_dim, dtype=dtype)}


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(seed)
    p, buf = {}, {}
    _conv_params(rng, p, "stem", config.stem_ch, config.n_leads, config.stem_kernel, dtype)
    _bn_params(p, buf, "stem.bn", config.stem_ch, dtype)
    for i, b in enumerate(config.blocks):
        pre = f"blocks.{i}"
        _conv_params(rng, p, f"{pre}.reduce", b.bottleneck_ch, b.in_ch, 1, dtype)
        _bn_params(p, buf, f"{pre}.bn1", b.bottleneck_ch, dtype)
        _conv_params(rng, p, f"{pre}.grouped", b.bottleneck_ch, b.bottleneck_ch // b.groups,
                     b.kernel, dtype)
        _bn_params(p, buf, f"{pre}.bn2", b.bottleneck_ch, dtype)
        _conv_params(rng, p, f"{pre}.expand", b.out_ch, b.bottleneck_ch, 1, dtype)
        hidden = b.out_ch // b.se_reduction
        p[f"{pre}.se.w1"] = _kaiming_uniform(rng, (hidden, b.out_ch), b.out_ch, dtype)
        p[f"{pre}.se.w2"] = _kaiming_uniform(rng, (b.out_ch, hidden), hidden, dtype)
        if not b.identity_shortcut:
            _conv_params(rng, p, f"{pre}.proj", b.out_ch, b.in_ch, 1, dtype)
    p.update(init_head(rng, config, config.head_dim, dtype))
    return ModelParams(config, p, buf)


def wrap(params: dict, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _bn(x, t, buffers, name, training):
    return E.batch_norm(x, t[f"{name}.gamma"], t[f"{name}.beta"], buffers[f"{name}.mean"],
                        buffers[f"{name}.var"], training, BN_MOMENTUM, BN_EPS)


def bottleneck_block(x: Tensor, cfg: BlockConfig, t: dict, buffers: dict, prefix: str,
                     training: bool) -> Tensor:
    if x.shape[1] != cfg.in_ch:
        raise ShapeError(f"{prefix}: expected {cfg.in_ch} channels, got {x.shape[1]}")
    h = E.conv1d(x, t[f"{prefix}.reduce.w"], t[f"{prefix}.reduce.b"])
    h = E.relu(_bn(h, t, buffers, f"{prefix}.bn1", training))
    h = E.conv1d(h, t[f"{prefix}.grouped.w"], t[f"{prefix}.grouped.b"], cfg.stride, cfg.groups)
    h = E.relu(_bn(h, t, buffers, f"{prefix}.bn2", training))
    h = E.conv1d(h, t[f"{prefix}.expand.w"], t[f"{prefix}.expand.b"])
    h = E.se_attention(h, t[f"{prefix}.se.w1"], t[f"{prefix}.se.w2"])
    if cfg.identity_shortcut:
        short = x
    else:
        short = E.conv1d(x, t[f"{prefix}.proj.w"], t[f"{prefix}.proj.b"], cfg.stride)
    return E.relu(E.add(h, short))


def backbone_forward(x: Tensor, t: dict, mp: ModelParams, training: bool) -> Tensor:
    cfg = mp.config
    if x.data.ndim != 3 or x.shape[1] != cfg.n_leads:
        raise ShapeError(f"expected input (B, {cfg.n_leads}, L), got {x.shape}")
    h = E.conv1d(x, t["stem.w"], t["stem.b"], cfg.stem_stride)
    h = E.relu(_bn(h, t, mp.buffers, "stem.bn", training))
    for i, b in enumerate(cfg.blocks):
        h = bottleneck_block(h, b, t, mp.buffers, f"blocks.{i}", training)
    return E.mean_length(h)


def model_forward(x, mp: ModelParams, training: bool = False, tensors: dict | None = None) -> Tensor:
    """Logits (B, head_dim). Pass ``tensors`` (from :func:`wrap`) to get gradients."""
    t = tensors if tensors is not None else wrap(mp.params, requires_grad=False)
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=mp.params["stem.w"].dtype))
    feats = backbone_forward(x, t, mp, training)
    return E.linear(feats, t["head.w"], t["head.b"])


def predict_logits(mp: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    dtype = mp.params["stem.w"].dtype
    out = [model_forward(x[i:i + batch_size].astype(dtype, copy=False), mp).data
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, mp.config.head_dim), dtype)


def predict_proba(mp: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    return E._sigmoid(predict_logits(mp, x, batch_size).astype(np.float64))
