"""
Network components built on :mod:`langskill.autodiff`: linear and layer-norm layers,
causal self-attention, pre-LN transformer blocks, learned positions, Adam and a linear
warm-up schedule.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from langskill import autodiff as ad
from langskill.autodiff import Tensor
from langskill.errors import NonFiniteError, ShapeError

INIT_STD = 0.02
MLP_RATIO = 4


def _normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """Container of named parameters and sub-modules with a train/eval flag."""

    def __init__(self) -> None:
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        """
        Yield parameters in attribute definition order.

        :param prefix: Dotted prefix prepended to every name
        :type prefix: str, optional
        :yield: (name, tensor) pairs
        """
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.values.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def _children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (item for item in value if isinstance(item, Module))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)


class Linear(Module):
    """Affine map ``x @ weight + bias`` over the last axis."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Tensor(_normal(rng, (in_features, out_features)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError("linear", x.shape, self.weight.shape)
        out = ad.matmul(x, self.weight)
        return out if self.bias is None else out + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


@dataclass
class TransformerConfig:
    """
    Shape of a causal transformer stack.

    Desk-scale defaults: 64-wide embeddings, one layer, four heads.
    """

    n_layers: int = 1
    embed_dim: int = 64
    n_heads: int = 4
    dropout: float = 0.1
    max_seq_len: int = 128

    def __post_init__(self) -> None:
        self._verify()

    def _verify(self) -> None:
        for key in ("n_layers", "embed_dim", "n_heads", "max_seq_len"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive but {getattr(self, key)} given")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout must lie in [0, 1] but {self.dropout} given")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads


def block_parameter_count(embed_dim: int) -> int:
    """
    Parameters of one block: two layer norms (4E), fused qkv (3E^2 + 3E), output
    projection (E^2 + E) and the 4x MLP (8E^2 + 5E), i.e. 12E^2 + 13E.
    """
    return 12 * embed_dim * embed_dim + 13 * embed_dim


def transformer_parameter_count(cfg: TransformerConfig) -> int:
    """Blocks plus the final layer norm (2E); embeddings are counted by their owners."""
    return cfg.n_layers * block_parameter_count(cfg.embed_dim) + 2 * cfg.embed_dim


def causal_mask(length: int) -> np.ndarray:
    """Boolean (T, T) mask, True where position i must not see position j > i."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class CausalSelfAttention(Module):
    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.n_heads = cfg.n_heads
        self.embed_dim = cfg.embed_dim
        self.dropout = cfg.dropout
        self.qkv = Linear(cfg.embed_dim, 3 * cfg.embed_dim, rng)
        self.proj = Linear(cfg.embed_dim, cfg.embed_dim, rng)

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        length = x.shape[0]
        head_dim = self.embed_dim // self.n_heads
        qkv = self.qkv(x)
        mask = causal_mask(length)
        heads = []
        for h in range(self.n_heads):
            lo = h * head_dim
            q = qkv[:, lo : lo + head_dim]
            k = qkv[:, self.embed_dim + lo : self.embed_dim + lo + head_dim]
            v = qkv[:, 2 * self.embed_dim + lo : 2 * self.embed_dim + lo + head_dim]
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(head_dim))
            weights = ad.softmax(ad.masked_fill(scores, mask))
            weights = ad.dropout(weights, self.dropout, rng, self.training)
            heads.append(ad.matmul(weights, v))
        out = self.proj(ad.concat(heads, axis=1))
        return ad.dropout(out, self.dropout, rng, self.training)


class Block(Module):
    """Pre-LN transformer block: attention and a GELU MLP, each with a residual path."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.ln_1 = LayerNorm(cfg.embed_dim)
        self.attn = CausalSelfAttention(cfg, rng)
        self.ln_2 = LayerNorm(cfg.embed_dim)
        self.fc_in = Linear(cfg.embed_dim, MLP_RATIO * cfg.embed_dim, rng)
        self.fc_out = Linear(MLP_RATIO * cfg.embed_dim, cfg.embed_dim, rng)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        x = x + self.attn(self.ln_1(x), rng)
        hidden = self.fc_out(ad.gelu(self.fc_in(self.ln_2(x))))
        return x + ad.dropout(hidden, self.dropout, rng, self.training)


class CausalTransformer(Module):
    """Stack of causal blocks followed by a final layer norm."""

    def __init__(self, cfg: TransformerConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.cfg = cfg
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.embed_dim)

    def __call__(self, tokens: Tensor, prefix_len: int = 0, rng: Optional[np.random.Generator] = None) -> Tensor:
        """
        Run the stack over a (T, E) sequence.

        The language prefix, when present, precedes every observation and is therefore
        visible to all later positions through the causal mask alone.

        :param tokens: Input embeddings of shape (T, embed_dim)
        :type tokens: Tensor
        :param prefix_len: Number of leading prefix positions
        :type prefix_len: int, optional
        :param rng: Dropout generator, required in train mode when dropout > 0
        :type rng: np.random.Generator, optional
        :return: Output of shape (T, embed_dim)
        :rtype: Tensor
        :raises ShapeError: If T exceeds max_seq_len or the width is wrong
        :raises ValueError: If prefix_len is outside [0, T]
        """
        if tokens.ndim != 2 or tokens.shape[1] != self.cfg.embed_dim:
            raise ShapeError("causal_transformer", tokens.shape, (self.cfg.max_seq_len, self.cfg.embed_dim))
        length = tokens.shape[0]
        if length > self.cfg.max_seq_len:
            raise ShapeError(
                "causal_transformer", tokens.shape, detail=f"sequence longer than max_seq_len {self.cfg.max_seq_len}"
            )
        if not 0 <= prefix_len <= length:
            raise ValueError(f"prefix_len must lie in [0, {length}] but {prefix_len} given")
        x = tokens
        for block in self.blocks:
            x = block(x, rng)
        return self.ln_f(x)


def causal_block_forward(
    block: CausalTransformer, tokens: Tensor, prefix_len: int = 0, rng: Optional[np.random.Generator] = None
) -> Tensor:
    return block(tokens, prefix_len=prefix_len, rng=rng)


class PositionalEmbedding(Module):
    """Learned position rows on one axis shared by prefix and sequence positions."""

    def __init__(self, max_seq_len: int, embed_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.max_seq_len = max_seq_len
        self.weight = Tensor(_normal(rng, (max_seq_len, embed_dim)), requires_grad=True)

    def __call__(self, length: int, offset: int = 0) -> Tensor:
        if length < 0 or offset < 0 or offset + length > self.max_seq_len:
            raise ShapeError(
                "positional_embed", (offset + length,), detail=f"exceeds max_seq_len {self.max_seq_len}"
            )
        return ad.embedding(self.weight, np.arange(offset, offset + length))


def positional_embed(table: PositionalEmbedding, length: int) -> Tensor:
    return table(length)


@dataclass
class WarmupSchedule:
    """Linear warm-up, ``lr(t) = base_lr * min(1, t / warmup_steps)``."""

    warmup_steps: int
    base_lr: float

    def __post_init__(self) -> None:
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be non-negative but {self.warmup_steps} given")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive but {self.base_lr} given")

    def lr(self, step: int) -> float:
        if self.warmup_steps == 0:
            return self.base_lr
        return self.base_lr * min(1.0, step / self.warmup_steps)


@dataclass
class AdamState:
    """Moments keyed by parameter name plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[Tuple[str, Tensor]], schedule: WarmupSchedule) -> float:
    """
    Apply one bias-corrected Adam update at the schedule's rate for ``state.step``.

    Gradients are read from each parameter's ``grad``. ``state.step`` must already count
    the current step. Parameters with no gradient are left untouched.

    :return: Learning rate applied
    :rtype: float
    """
    lr = schedule.lr(state.step)
    correction_1 = 1.0 - state.beta1**state.step
    correction_2 = 1.0 - state.beta2**state.step
    for name, param in params:
        if param.grad is None:
            continue
        grad = param.grad
        m = state.first_moment.setdefault(name, np.zeros_like(param.values))
        v = state.second_moment.setdefault(name, np.zeros_like(param.values))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param.values -= lr * (m / correction_1) / (np.sqrt(v / correction_2) + state.eps)
    return lr


class Adam:
    """
    Adam over named parameter groups, each with its own warm-up schedule.
    """

    def __init__(
        self,
        groups: Dict[str, Sequence[Tuple[str, Tensor]]],
        schedules: Dict[str, WarmupSchedule],
        state: Optional[AdamState] = None,
        log_level: str = "INFO",
    ) -> None:
        """
        Initialize the Adam object.

        :param groups: Group name to (parameter name, tensor) pairs
        :type groups: dict
        :param schedules: Group name to learning-rate schedule
        :type schedules: dict
        :param state: Existing optimizer state to resume from
        :type state: AdamState, optional
        :param log_level: Logging level, defaults to "INFO"
        :type log_level: str, optional
        """
        self.log = logging.getLogger(f"{__name__}.{self.__class__.__name__}")
        self.log.setLevel(log_level)
        missing = set(groups) - set(schedules)
        if missing:
            raise ValueError(f"no learning-rate schedule for groups {sorted(missing)}")
        self.groups = {name: list(params) for name, params in groups.items()}
        self.schedules = schedules
        self.state = state or AdamState()

    def current_lr(self, group: str, step: Optional[int] = None) -> float:
        return self.schedules[group].lr(self.state.step if step is None else step)

    def step(self) -> Dict[str, float]:
        """
        Update every group at its own learning rate.

        :return: Learning rate applied per group
        :rtype: dict
        :raises NonFiniteError: If any gradient is non-finite; no parameter is updated
        """
        for params in self.groups.values():
            for name, param in params:
                if param.grad is not None and not np.all(np.isfinite(param.grad)):
                    raise NonFiniteError("non-finite gradient", where=f"parameter {name}")
        self.state.step += 1
        applied = {}
        for group, params in self.groups.items():
            applied[group] = adam_step(self.state, params, self.schedules[group])
        return applied

    def zero_grad(self) -> None:
        for params in self.groups.values():
            for _, param in params:
                param.grad = None
