"""Training/architecture configuration and the flat parameter store."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..data.scenes import N_COLOR_CHANNELS, N_SHAPE_CHANNELS
from ..grounding import QUERY_MODES

FEATURE_MODES = ("A", "B", "A+B")


@dataclass(frozen=True)
class TrainConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    max_seq: int = 128
    batch: int = 16
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    epochs: int = 70
    seed: int = 0
    query_mode: str = "sum"
    feature_mode: str = "A+B"
    loss_weights: dict = field(default_factory=lambda: {
        "lm": 1.0, "dice": 1.0, "bce": 0.1, "proj": 1.0})
    log_every: int = 0  # steps between log records; 0 logs once per epoch
    shuffle_entities: bool = True  # reorder each example's entity prefix every epoch

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"unknown grounding-query mode {self.query_mode!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature-source mode {self.feature_mode!r}")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return type(self).from_dict({**self.to_dict(), **kw})

    @property
    def backbones(self) -> tuple[str, ...]:
        return {"A": ("A",), "B": ("B",), "A+B": ("A", "B")}[self.feature_mode]


BACKBONE_DIMS = {"A": N_COLOR_CHANNELS, "B": N_SHAPE_CHANNELS}


def param_shapes(cfg: TrainConfig, vocab_size: int) -> list[tuple[str, tuple[int, ...]]]:
    """Every parameter in its fixed checkpoint order.

    Matrices are stored input-major so that ``y = x @ w + b``.
    """
    d = cfg.d
    out = [("tok_emb", (vocab_size, d)), ("pos_emb", (cfg.max_seq, d))]
    for layer in range(cfg.layers):
        p = f"blocks.{layer}."
        out += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.wqkv", (d, 3 * d)), (p + "attn.bqkv", (3 * d,)),
            (p + "attn.wo", (d, d)), (p + "attn.bo", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w1", (d, 4 * d)), (p + "mlp.b1", (4 * d,)),
            (p + "mlp.w2", (4 * d, d)), (p + "mlp.b2", (d,)),
        ]
    out += [("lnf.g", (d,)), ("lnf.b", (d,)), ("lm_head.w", (d, vocab_size)),
            ("lm_head.b", (vocab_size,))]
    for name, dim in BACKBONE_DIMS.items():
        p = f"proj.{name}."
        out += [(p + "w1", (dim, 2 * d)), (p + "b1", (2 * d,)),
                (p + "w2", (2 * d, d)), (p + "b2", (d,))]
    out += [("head.w1", (2 * d, 2 * d)), ("head.b1", (2 * d,)),
            ("head.w2", (2 * d, 1)), ("head.b2", (1,))]
    return out


def init_params(cfg: TrainConfig, vocab_size: int, seed=None) -> dict[str, np.ndarray]:
    """Draw initial parameters.

    Token and position embeddings are N(0, 0.02). Every other matrix is
    N(0, 1/fan_in), where fan_in is its first axis, and the residual output
    projections (``attn.wo`` and ``mlp.w2``) are further shrunk by
    ``sqrt(2 * layers)``. Biases and norm offsets start at zero and norm gains
    at one.
    """
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    params = {}
    for name, shape in param_shapes(cfg, vocab_size):
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) >= 2:
            std = 1.0 / np.sqrt(shape[0])
            if name.endswith("attn.wo") or name.endswith("mlp.w2"):
                std /= np.sqrt(2 * cfg.layers)
            arr = rng.normal(0.0, std, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(np.float32)
    return params


def sub(params: dict, prefix: str) -> dict:
    """View of the parameters under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
