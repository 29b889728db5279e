"""Perceiver-style latent encoder over token sets.

A learned latent array cross-attends to the (lifted) tokens, then runs a
stack of latent self-attention layers; this repeats for ``num_blocks``
blocks, with blocks after the first optionally sharing one parameter set.
A single learned query pools the latents and an affine head emits logits.

All layers are pre-norm with residual connections:

    x = x + Attn(LN(x), LN(ctx))
    x = x + MLP(LN(x))
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError, NumericFailure, PreconditionError
from .tokenizer import TokenSet, prune_indices

MODES = ("train", "eval")


@dataclass(frozen=True)
class EncoderConfig:
    num_latents: int = 128
    latent_dim: int = 256
    num_blocks: int = 4
    self_layers_per_block: int = 4
    num_heads: int = 8
    share_weights_after_first: bool = True
    prune_p: float = 0.5
    num_classes: int = 19
    mlp_ratio: int = 4

    def __post_init__(self):
        for name in ("num_latents", "latent_dim", "num_blocks", "num_heads", "num_classes", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.self_layers_per_block < 0:
            raise ConfigurationError("self_layers_per_block must be >= 0")
        if self.latent_dim % self.num_heads:
            raise ConfigurationError(
                f"latent_dim={self.latent_dim} is not divisible by num_heads={self.num_heads}"
            )
        if not 0.0 <= self.prune_p < 1.0:
            raise ConfigurationError(f"prune_p must be in [0, 1), got {self.prune_p}")

    def physical_block(self, block: int) -> int:
        """Index of the parameter set used by logical block ``block``."""
        return min(block, 1) if self.share_weights_after_first else block

    @property
    def num_physical_blocks(self) -> int:
        return min(self.num_blocks, 2) if self.share_weights_after_first else self.num_blocks

    def to_dict(self) -> dict:
        return asdict(self)


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}wq": (d, d),
        f"{prefix}wk": (d, d),
        f"{prefix}wv": (d, d),
        f"{prefix}wo": (d, d),
        f"{prefix}bo": (d,),
    }


def _mlp_shapes(prefix: str, d: int, ratio: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}ln_mlp.g": (d,),
        f"{prefix}ln_mlp.b": (d,),
        f"{prefix}mlp.w1": (d, ratio * d),
        f"{prefix}mlp.b1": (ratio * d,),
        f"{prefix}mlp.w2": (ratio * d, d),
        f"{prefix}mlp.b2": (d,),
    }


def parameter_shapes(cfg: EncoderConfig, token_dim: int) -> dict[str, tuple[int, ...]]:
    d, r = cfg.latent_dim, cfg.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "latents": (cfg.num_latents, d),
        "lift.w": (token_dim, d),
        "lift.b": (d,),
    }
    for b in range(cfg.num_physical_blocks):
        cross = f"blocks.{b}.cross."
        shapes.update({f"{cross}ln_q.g": (d,), f"{cross}ln_q.b": (d,), f"{cross}ln_kv.g": (d,), f"{cross}ln_kv.b": (d,)})
        shapes.update(_attention_shapes(cross, d))
        shapes.update(_mlp_shapes(cross, d, r))
        for j in range(cfg.self_layers_per_block):
            layer = f"blocks.{b}.self.{j}."
            shapes.update({f"{layer}ln.g": (d,), f"{layer}ln.b": (d,)})
            shapes.update(_attention_shapes(layer, d))
            shapes.update(_mlp_shapes(layer, d, r))
    shapes.update(
        {
            "pool.ln.g": (d,),
            "pool.ln.b": (d,),
            "pool.query": (d,),
            "pool.wk": (d, d),
            "pool.wv": (d, d),
            "head.w": (d, cfg.num_classes),
            "head.b": (cfg.num_classes,),
        }
    )
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class ParameterStore:
    """Named dense arrays plus the config and token width they were built for."""

    config: EncoderConfig
    token_dim: int
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def names(self) -> list[str]:
        return list(self.arrays)

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(self.config, self.token_dim, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.config, self.token_dim, {k: v.copy() for k, v in self.arrays.items()})


def init_parameters(cfg: EncoderConfig, token_dim: int, seed: int = 0, dtype=np.float32) -> ParameterStore:
    """Truncated-normal (std 0.02, +-2 std) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in parameter_shapes(cfg, token_dim).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "bo", "b1", "b2"):
            arr = np.zeros(shape)
        else:
            arr = _truncated_normal(rng, shape, 0.02)
        arrays[name] = arr.astype(dtype)
    return ParameterStore(cfg, token_dim, arrays)


def bind(params: ParameterStore, requires_grad: bool = False) -> dict[str, Tensor]:
    """Wrap every array in a Tensor leaf; shared blocks resolve to the same leaf."""
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.arrays.items()}


# layers (Tensor level)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return x.reshape(B, n, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * dh)


def attention(q_in: Tensor, kv_in: Tensor, P: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention, output-projected (no residual)."""
    dh = q_in.shape[-1] // heads
    q = _split_heads(q_in @ P[prefix + "wq"], heads)
    k = _split_heads(kv_in @ P[prefix + "wk"], heads)
    v = _split_heads(kv_in @ P[prefix + "wv"], heads)
    weights = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)), axis=-1)
    return _merge_heads(weights @ v) @ P[prefix + "wo"] + P[prefix + "bo"]


def _mlp(x: Tensor, P: dict[str, Tensor], prefix: str) -> Tensor:
    h = ag.layer_norm(x, P[prefix + "ln_mlp.g"], P[prefix + "ln_mlp.b"])
    h = ag.gelu(h @ P[prefix + "mlp.w1"] + P[prefix + "mlp.b1"])
    return h @ P[prefix + "mlp.w2"] + P[prefix + "mlp.b2"]


def lift(tokens: Tensor, P: dict[str, Tensor]) -> Tensor:
    """Affine map from token width D to the latent width."""
    return tokens @ P["lift.w"] + P["lift.b"]


def cross_block(latents: Tensor, context: Tensor, P: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    """Latents attend to already-lifted ``context`` of shape (B, N, latent_dim)."""
    q_in = ag.layer_norm(latents, P[prefix + "ln_q.g"], P[prefix + "ln_q.b"])
    kv_in = ag.layer_norm(context, P[prefix + "ln_kv.g"], P[prefix + "ln_kv.b"])
    x = latents + attention(q_in, kv_in, P, prefix, heads)
    return x + _mlp(x, P, prefix)


def self_block(latents: Tensor, P: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    h = ag.layer_norm(latents, P[prefix + "ln.g"], P[prefix + "ln.b"])
    x = latents + attention(h, h, P, prefix, heads)
    return x + _mlp(x, P, prefix)


def pool(latents: Tensor, P: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Single-query attention pooling. Returns (pooled (B, d), weights (B, num_latents))."""
    B, n, d = latents.shape
    x = ag.layer_norm(latents, P["pool.ln.g"], P["pool.ln.b"])
    keys = x @ P["pool.wk"]
    values = x @ P["pool.wv"]
    scores = (keys @ P["pool.query"].reshape(d, 1)).reshape(B, n) * (1.0 / math.sqrt(d))
    weights = ag.softmax(scores, axis=-1)
    pooled = (weights.reshape(B, 1, n) @ values).reshape(B, d)
    return pooled, weights


def head(pooled: Tensor, P: dict[str, Tensor]) -> Tensor:
    return pooled @ P["head.w"] + P["head.b"]


def _check_finite(x: Tensor, where: str):
    if not np.all(np.isfinite(x.data)):
        raise NumericFailure(where)


def derive_seed(step_seed: int, block: int) -> int:
    """Independent 64-bit pruning seed for one (step, block) pair."""
    ss = np.random.SeedSequence([int(step_seed) & 0xFFFFFFFFFFFFFFFF, int(block)])
    return int(ss.generate_state(1, np.uint64)[0])


def encode_tensor(
    tokens: np.ndarray | Tensor,
    P: dict[str, Tensor],
    cfg: EncoderConfig,
    mode: str = "eval",
    step_seeds: Sequence[int] | None = None,
    num_blocks: int | None = None,
) -> Tensor:
    """Batched encoder on tokens of shape (B, N, D); returns latents (B, num_latents, d)."""
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}, got {mode!r}")
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    if tokens.ndim != 3:
        raise PreconditionError(f"expected tokens of shape (B, N, D), got {tokens.shape}")
    B, N, D = tokens.shape
    if D != P["lift.w"].shape[0]:
        raise PreconditionError(f"token width {D} does not match parameters ({P['lift.w'].shape[0]})")
    if N < 1:
        raise PreconditionError("empty token set")
    prune = mode == "train" and cfg.prune_p > 0
    if prune and (step_seeds is None or len(step_seeds) != B):
        raise PreconditionError("train mode needs one step seed per sample")

    context = lift(tokens, P)
    latents = ag.broadcast_to(P["latents"], (B,) + P["latents"].shape)
    for b in range(cfg.num_blocks if num_blocks is None else num_blocks):
        pb = cfg.physical_block(b)
        ctx = context
        if prune:
            idx = np.stack([prune_indices(N, cfg.prune_p, derive_seed(s, b)) for s in step_seeds])
            ctx = ag.gather_rows(context, idx)
        latents = cross_block(latents, ctx, P, f"blocks.{pb}.cross.", cfg.num_heads)
        _check_finite(latents, f"block {b} cross-attention")
        for j in range(cfg.self_layers_per_block):
            latents = self_block(latents, P, f"blocks.{pb}.self.{j}.", cfg.num_heads)
            _check_finite(latents, f"block {b} self-attention layer {j}")
    return latents


def forward(
    tokens: np.ndarray | Tensor,
    P: dict[str, Tensor],
    cfg: EncoderConfig,
    mode: str = "eval",
    step_seeds: Sequence[int] | None = None,
    num_blocks: int | None = None,
) -> Tensor:
    """Tokens (B, N, D) to logits (B, num_classes)."""
    latents = encode_tensor(tokens, P, cfg, mode, step_seeds, num_blocks)
    pooled, _ = pool(latents, P)
    return head(pooled, P)


# array-level API


def _as_batch(x) -> tuple[np.ndarray, bool]:
    if isinstance(x, TokenSet):
        x = x.tokens
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    return x, False


def _cast(x: np.ndarray, params: ParameterStore) -> np.ndarray:
    return x.astype(params.dtype, copy=False)


def cross_attention(latents, tokens, params: ParameterStore, block: int = 0) -> np.ndarray:
    """One cross-attention block (lift, attention, MLP) of logical block ``block``."""
    lat, single = _as_batch(latents)
    tok, _ = _as_batch(tokens)
    with ag.no_grad():
        P = bind(params)
        prefix = f"blocks.{params.config.physical_block(block)}.cross."
        out = cross_block(Tensor(_cast(lat, params)), lift(Tensor(_cast(tok, params)), P), P, prefix, params.config.num_heads)
    _check_finite(out, f"block {block} cross-attention")
    return out.data[0] if single else out.data


def self_attention_layer(latents, params: ParameterStore, block: int = 0, layer: int = 0) -> np.ndarray:
    lat, single = _as_batch(latents)
    with ag.no_grad():
        P = bind(params)
        prefix = f"blocks.{params.config.physical_block(block)}.self.{layer}."
        out = self_block(Tensor(_cast(lat, params)), P, prefix, params.config.num_heads)
    _check_finite(out, f"block {block} self-attention layer {layer}")
    return out.data[0] if single else out.data


def encode(tokens, params: ParameterStore, cfg: EncoderConfig | None = None, mode: str = "eval", step_seed: int = 0) -> np.ndarray:
    """Latent state (num_latents, latent_dim) for one token set."""
    cfg = cfg or params.config
    tok, single = _as_batch(tokens)
    seeds = [step_seed] * tok.shape[0]
    with ag.no_grad():
        out = encode_tensor(_cast(tok, params), bind(params), cfg, mode, seeds)
    return out.data[0] if single else out.data


def attention_pool(latents, params: ParameterStore) -> tuple[np.ndarray, np.ndarray]:
    """(pooled vector, pooling weights) for one latent state."""
    lat, single = _as_batch(latents)
    with ag.no_grad():
        pooled, weights = pool(Tensor(_cast(lat, params)), bind(params))
    if single:
        return pooled.data[0], weights.data[0]
    return pooled.data, weights.data


def pool_values(latents, params: ParameterStore) -> np.ndarray:
    """Value projection the pool mixes: ``LN(latents) @ W_v``."""
    lat, single = _as_batch(latents)
    with ag.no_grad():
        P = bind(params)
        v = ag.layer_norm(Tensor(_cast(lat, params)), P["pool.ln.g"], P["pool.ln.b"]) @ P["pool.wv"]
    return v.data[0] if single else v.data


def classify(pooled, params: ParameterStore) -> np.ndarray:
    pooled = np.asarray(pooled, dtype=params.dtype)
    return pooled @ params["head.w"] + params["head.b"]


def predict_logits(tokens, params: ParameterStore, cfg: EncoderConfig | None = None) -> np.ndarray:
    """Eval-mode logits for one token set (N, D) or a batch (B, N, D)."""
    cfg = cfg or params.config
    tok, single = _as_batch(tokens)
    with ag.no_grad():
        logits = forward(_cast(tok, params), bind(params), cfg, "eval")
    return logits.data[0] if single else logits.data


def loss_and_grads(
    params: ParameterStore,
    tokens: np.ndarray,
    targets: np.ndarray,
    cfg: EncoderConfig | None = None,
    mode: str = "eval",
    step_seeds: Sequence[int] | None = None,
    num_blocks: int | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean BCE loss over a batch and its gradient w.r.t. every stored array."""
    cfg = cfg or params.config
    tok, single = _as_batch(tokens)
    targets = np.asarray(targets, dtype=params.dtype)
    if single:
        targets = targets[None]
    P = bind(params, requires_grad=True)
    loss = ag.bce_with_logits(forward(_cast(tok, params), P, cfg, mode, step_seeds, num_blocks), targets)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return float(loss.data), grads


def loss_only(params, tokens, targets, cfg=None, mode="eval", step_seeds=None, num_blocks=None) -> float:
    cfg = cfg or params.config
    tok, single = _as_batch(tokens)
    targets = np.asarray(targets, dtype=params.dtype)
    if single:
        targets = targets[None]
    with ag.no_grad():
        loss = ag.bce_with_logits(forward(_cast(tok, params), bind(params), cfg, mode, step_seeds, num_blocks), targets)
    return float(loss.data)


# gradient check


@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float
    num_checked: int
    groups: list[str]
    worst: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def worst_parameter(self) -> str:
        return f"{self.worst[0].name}[{self.worst[0].index}]" if self.worst else ""

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_error": self.max_rel_error,
            "num_checked": self.num_checked,
            "groups": self.groups,
            "worst": [asdict(e) for e in self.worst],
        }

    def format(self) -> str:
        lines = [
            f"gradcheck {'PASS' if self.passed else 'FAIL'}: max relative error {self.max_rel_error:.3e} "
            f"(tolerance {self.tolerance:.0e}) over {self.num_checked} parameters in {len(self.groups)} groups"
        ]
        for e in self.worst:
            lines.append(
                f"  {e.name}[{e.index}]  analytic={e.analytic:+.6e}  numeric={e.numeric:+.6e}  rel={e.rel_error:.3e}"
            )
        return "\n".join(lines)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dominating."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    params: ParameterStore,
    tokens,
    target,
    tolerance: float = 1e-4,
    *,
    num_samples: int = 200,
    h: float = 1e-5,
    seed: int = 0,
    cfg: EncoderConfig | None = None,
    num_blocks: int | None = None,
    report_worst: int = 5,
    grad_hook: Callable[[dict[str, np.ndarray]], None] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients of the BCE loss with central differences.

    Runs in float64. At least ``num_samples`` scalars are drawn, spread evenly
    over every named parameter array. ``grad_hook`` may tamper with the
    analytic gradients before comparison (fault-injection tests).
    """
    params = params.astype(np.float64)
    cfg = cfg or params.config
    tok, _ = _as_batch(tokens)
    tok = tok.astype(np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(tok.shape[0], -1)

    _, grads = loss_and_grads(params, tok, target, cfg, "eval", num_blocks=num_blocks)
    if grad_hook is not None:
        grad_hook(grads)

    rng = np.random.default_rng(seed)
    names = params.names()
    per_group = max(1, math.ceil(num_samples / len(names)))
    entries: list[GradCheckEntry] = []
    for name in names:
        arr = params.arrays[name]
        picks = rng.choice(arr.size, size=min(per_group, arr.size), replace=False)
        for i in picks:
            i = int(i)
            orig = arr.flat[i]
            arr.flat[i] = orig + h
            up = loss_only(params, tok, target, cfg, "eval", num_blocks=num_blocks)
            arr.flat[i] = orig - h
            down = loss_only(params, tok, target, cfg, "eval", num_blocks=num_blocks)
            arr.flat[i] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(grads[name].flat[i])
            entries.append(GradCheckEntry(name, i, analytic, numeric, relative_error(analytic, numeric)))
    entries.sort(key=lambda e: e.rel_error, reverse=True)
    return GradCheckReport(
        tolerance=tolerance,
        max_rel_error=entries[0].rel_error if entries else 0.0,
        num_checked=len(entries),
        groups=names,
        worst=entries[:report_worst],
    )


def toy_instance(seed: int = 0, num_tokens: int = 6, num_latents: int = 2, latent_dim: int = 8, token_dim: int = 12, num_classes: int = 3):
    """Small float64 problem for gradient checks: (cfg, params, tokens, target).

    Weights are drawn at std 0.5 rather than 0.02 so every path carries a
    gradient well above finite-difference noise.
    """
    cfg = EncoderConfig(
        num_latents=num_latents,
        latent_dim=latent_dim,
        num_blocks=3,
        self_layers_per_block=1,
        num_heads=2,
        share_weights_after_first=True,
        prune_p=0.5,
        num_classes=num_classes,
        mlp_ratio=2,
    )
    rng = np.random.default_rng(seed)
    params = init_parameters(cfg, token_dim, seed, dtype=np.float64)
    for name, arr in params.arrays.items():
        arr += rng.normal(0.0, 0.5 if arr.ndim > 1 else 0.2, arr.shape)
    tokens = rng.uniform(-1.0, 1.0, (num_tokens, token_dim))
    target = (rng.random(num_classes) < 0.5).astype(np.float64)
    return cfg, params, tokens, target
