"""SwiGLU FFN, expert splitting, routing, and a toy causal decoder host."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .policy import LayerPolicy
from .tensor import Tensor2

ROUTER_INIT_STD = 0.02
NORM_EPS = 1e-5
ROPE_BASE = 10000.0


@dataclass(frozen=True)
class DenseFfn:
    w_up: Tensor2
    w_gate: Tensor2
    w_down: Tensor2

    def __post_init__(self):
        d_h, d_i = self.w_up.shape
        if self.w_gate.shape != (d_h, d_i) or self.w_down.shape != (d_i, d_h):
            raise ValueError(
                f"inconsistent FFN shapes: up {self.w_up.shape}, gate {self.w_gate.shape}, down {self.w_down.shape}"
            )

    @property
    def d_h(self) -> int:
        return self.w_up.rows

    @property
    def d_i(self) -> int:
        return self.w_up.cols

    def params(self) -> list[Tensor2]:
        return [self.w_up, self.w_gate, self.w_down]


@dataclass(frozen=True)
class Expert(DenseFfn):
    """A slice of a dense FFN. ``source_slice`` is the 0-based half-open column range."""

    source_slice: tuple[int, int] = (0, 0)

    @property
    def index_set(self) -> range:
        """1-based intermediate indices this expert was cut from."""
        return range(self.source_slice[0] + 1, self.source_slice[1] + 1)


@dataclass(frozen=True)
class Router:
    w: Tensor2

    def __post_init__(self):
        if self.w.cols < 2:
            raise ValueError(f"router needs at least 2 experts, got {self.w.cols}")

    @property
    def n_experts(self) -> int:
        return self.w.cols

    @classmethod
    def init(cls, d_h: int, n_experts: int, rng: np.random.Generator, std: float = ROUTER_INIT_STD) -> "Router":
        return cls(Tensor2(rng.normal(0.0, std, size=(d_h, n_experts))))


@dataclass(frozen=True)
class MoeBlock:
    router: Router
    experts: tuple[Expert, ...]
    policy: LayerPolicy = field(default_factory=lambda: LayerPolicy.static(2))

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        if len(self.experts) != self.router.n_experts:
            raise ValueError(f"{len(self.experts)} experts but router has {self.router.n_experts} outputs")
        shapes = {(e.d_h, e.d_i) for e in self.experts}
        if len(shapes) != 1:
            raise ValueError(f"experts disagree on shape: {sorted(shapes)}")
        if self.router.w.rows != self.d_h:
            raise ValueError(f"router width {self.router.w.rows} != expert d_h {self.d_h}")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d_h(self) -> int:
        return self.experts[0].d_h

    @property
    def d_expert(self) -> int:
        return self.experts[0].d_i

    def params(self) -> list[Tensor2]:
        out = [self.router.w]
        for e in self.experts:
            out.extend(e.params())
        return out

    def with_policy(self, policy: LayerPolicy) -> "MoeBlock":
        return replace(self, policy=policy)


# --- forward passes ---------------------------------------------------------


def _swiglu(ffn: DenseFfn, x: Tensor2) -> Tensor2:
    if x.cols != ffn.d_h:
        raise ValueError(f"input width {x.cols} != d_h {ffn.d_h}")
    h = T.mul(T.matmul(x, ffn.w_up), T.swish(T.matmul(x, ffn.w_gate)))
    return T.matmul(h, ffn.w_down)


def ffn_forward(ffn: DenseFfn, x: Tensor2) -> Tensor2:
    """``(x W_u * swish(x W_g)) W_d`` row by row."""
    return _swiglu(ffn, x)


def expert_forward(expert: Expert, x: Tensor2) -> Tensor2:
    return _swiglu(expert, x)


def split_ffn(ffn: DenseFfn, n_experts: int) -> list[Expert]:
    """Cut ``ffn`` into ``n_experts`` experts along the intermediate axis.

    Expert ``i`` (0-based) keeps columns ``[i*d', (i+1)*d')`` of the up and
    gate projections and the same rows of the down projection, so the sum
    of all expert outputs equals the dense output.
    """
    if n_experts < 1:
        raise ValueError(f"need at least one expert, got {n_experts}")
    if ffn.d_i % n_experts:
        raise ValueError(f"d_i={ffn.d_i} is not divisible by N={n_experts}")
    d = ffn.d_i // n_experts
    up, gate, down = ffn.w_up.data, ffn.w_gate.data, ffn.w_down.data
    experts = []
    for i in range(n_experts):
        s = slice(i * d, (i + 1) * d)
        experts.append(Expert(Tensor2(up[:, s]), Tensor2(gate[:, s]), Tensor2(down[s, :]), (s.start, s.stop)))
    return experts


def route(router: Router, x: Tensor2) -> Tensor2:
    """Routing weights ``softmax(x W_r)``, one probability row per token."""
    if x.cols != router.w.rows:
        raise ValueError(f"input width {x.cols} != router d_h {router.w.rows}")
    return T.softmax_rows(T.matmul(x, router.w))


@dataclass
class MoeOutput:
    y: Tensor2
    probs: Tensor2
    mask: np.ndarray  # (tokens, N) bool, selected experts
    ks: np.ndarray


def _as_ks(k_per_token, n_tokens: int, n_experts: int) -> np.ndarray:
    ks = np.asarray(k_per_token, dtype=np.intp)
    if ks.ndim == 0:
        ks = np.full(n_tokens, int(ks), dtype=np.intp)
    if ks.shape != (n_tokens,):
        raise ValueError(f"k_per_token has shape {ks.shape}, expected ({n_tokens},)")
    if n_tokens and (ks.min() < 1 or ks.max() > n_experts):
        raise ValueError(f"k must be in [1, {n_experts}], got range [{ks.min()}, {ks.max()}]")
    return ks


def selection_mask(probs: np.ndarray, ks: np.ndarray) -> np.ndarray:
    order = T.rank_rows(probs)
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(probs.shape[1])[None, :], axis=1)
    return ranks < ks[:, None]


def moe_forward_detailed(block: MoeBlock, x: Tensor2, k_per_token, renormalize: bool = True) -> MoeOutput:
    """Sparse mixture: each token goes only to its top-k experts.

    With ``renormalize`` the selected routing weights are rescaled to sum
    to one per token; otherwise the raw softmax weights are used.
    Gradients reach the router only through the selected weights.
    """
    if x.cols != block.d_h:
        raise ValueError(f"input width {x.cols} != d_h {block.d_h}")
    n = x.rows
    probs = route(block.router, x)
    ks = _as_ks(k_per_token, n, block.n_experts)
    mask = selection_mask(probs.data, ks)
    gates = T.mul(probs, Tensor2(mask, dtype=probs.dtype))
    if renormalize:
        gates = T.normalize_rows(gates)
    y = None
    for j, expert in enumerate(block.experts):
        rows = np.flatnonzero(mask[:, j])
        if rows.size == 0:
            continue
        out = expert_forward(expert, T.take_rows(x, rows))
        out = T.mul(out, T.take_elements(gates, rows, j))
        part = T.scatter_rows(out, rows, n)
        y = part if y is None else T.add(y, part)
    if y is None:
        y = Tensor2(np.zeros((n, block.d_h)), dtype=x.dtype)
    return MoeOutput(y, probs, mask, ks)


def moe_forward(block: MoeBlock, x: Tensor2, k_per_token, renormalize: bool = True) -> Tensor2:
    return moe_forward_detailed(block, x, k_per_token, renormalize).y


def block_forward(block: MoeBlock, x: Tensor2) -> MoeOutput:
    """Run ``block`` with k chosen by its own policy."""
    if block.policy.kind == "static":
        k = min(block.policy.k, block.n_experts)
        return moe_forward_detailed(block, x, k)
    probs = route(block.router, x)
    ks = np.minimum(block.policy.k_per_token(probs.data.max(axis=1)), block.n_experts)
    return moe_forward_detailed(block, x, ks)


def init_moe_block(teacher: DenseFfn, n_experts: int, init: str = "split", seed: int = 0,
                   policy: LayerPolicy | None = None) -> MoeBlock:
    """Build an MoE block for ``teacher``.

    ``init="split"`` cuts the teacher weights; ``init="random"`` draws expert
    weights from a Gaussian with the teacher matrices' own standard
    deviations (same shapes, no inherited structure).
    """
    rng = np.random.default_rng(seed)
    # router first, so both inits share it for a given seed
    router = Router.init(teacher.d_h, n_experts, rng)
    experts = split_ffn(teacher, n_experts)
    if init == "random":
        fresh = []
        for e in experts:
            mats = [Tensor2(rng.normal(0.0, float(src.data.std()), size=w.shape))
                    for w, src in zip(e.params(), teacher.params())]
            fresh.append(Expert(*mats, e.source_slice))
        experts = fresh
    elif init != "split":
        raise ValueError(f"unknown init {init!r}")
    return MoeBlock(router, tuple(experts), policy or LayerPolicy.static(min(2, n_experts)))


# --- host transformer ---------------------------------------------------------


@dataclass(frozen=True)
class ToyTransformerConfig:
    n_layers: int = 4
    d_h: int = 64
    d_i: int = 256
    n_heads: int = 4
    vocab: int = 256
    seq_len: int = 64

    def __post_init__(self):
        for name in ("n_layers", "d_h", "d_i", "n_heads", "vocab", "seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_h % self.n_heads:
            raise ValueError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if (self.d_h // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("n_layers", "d_h", "d_i", "n_heads", "vocab", "seq_len")}


LLAMA2_7B = ToyTransformerConfig(n_layers=32, d_h=4096, d_i=11008, n_heads=32, vocab=32000, seq_len=4096)


class ForwardHooks:
    """No-op observer; subclasses override what they need."""

    def on_ffn_input(self, layer: int, x: np.ndarray) -> None:
        pass

    def on_ffn_output(self, layer: int, y: np.ndarray) -> None:
        pass

    def on_routing(self, layer: int, probs: np.ndarray, ks: np.ndarray) -> None:
        pass


@dataclass
class DecoderLayer:
    attn_norm: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_norm: np.ndarray
    ffn: DenseFfn | MoeBlock


def rms_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + np.float32(NORM_EPS))
    return (x * inv * gain).astype(np.float32)


def _rope(x: np.ndarray) -> np.ndarray:
    # x: (heads, T, head_dim), rotate halves.
    n_t, hd = x.shape[1], x.shape[2]
    half = hd // 2
    freqs = ROPE_BASE ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.arange(n_t, dtype=np.float64)[:, None] * freqs[None, :]
    cos, sin = np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


class ToyTransformer:
    """Pre-norm causal decoder: RMSNorm, rotary multi-head attention, SwiGLU FFN.

    Any layer's FFN may be a ``MoeBlock`` instead of a ``DenseFfn``.
    """

    def __init__(self, config: ToyTransformerConfig, embed: np.ndarray, layers: list[DecoderLayer],
                 final_norm: np.ndarray, lm_head: np.ndarray):
        if len(layers) != config.n_layers:
            raise ValueError(f"config says {config.n_layers} layers, got {len(layers)}")
        self.config = config
        self.embed = embed
        self.layers = layers
        self.final_norm = final_norm
        self.lm_head = lm_head
        self.source: str | None = None  # path of the dense checkpoint this was assembled from

    @classmethod
    def random(cls, config: ToyTransformerConfig, seed: int = 0) -> "ToyTransformer":
        rng = np.random.default_rng(seed)
        d, di = config.d_h, config.d_i

        def g(shape, fan_in):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(np.float32)

        layers = []
        for _ in range(config.n_layers):
            ffn = DenseFfn(Tensor2(g((d, di), d)), Tensor2(g((d, di), d)), Tensor2(g((di, d), di)))
            layers.append(DecoderLayer(np.ones(d, np.float32), g((d, d), d), g((d, d), d), g((d, d), d),
                                       g((d, d), d), np.ones(d, np.float32), ffn))
        embed = rng.normal(0.0, 1.0, size=(config.vocab, d)).astype(np.float32)
        return cls(config, embed, layers, np.ones(d, np.float32), g((d, config.vocab), d))

    def moe_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer.ffn, MoeBlock)]

    def copy(self) -> "ToyTransformer":
        # Arrays are treated as read-only, so a shallow structural copy suffices.
        layers = [replace(layer) for layer in self.layers]
        out = ToyTransformer(self.config, self.embed, layers, self.final_norm, self.lm_head)
        out.source = self.source
        return out

    def _attention(self, layer: DecoderLayer, x: np.ndarray) -> np.ndarray:
        n_t, d = x.shape
        nh = self.config.n_heads
        hd = d // nh

        def heads(w):
            return (x @ w).reshape(n_t, nh, hd).transpose(1, 0, 2)

        q, k, v = _rope(heads(layer.w_q)), _rope(heads(layer.w_k)), heads(layer.w_v)
        scores = q @ k.transpose(0, 2, 1) / np.float32(math.sqrt(hd))
        causal = np.triu(np.ones((n_t, n_t), dtype=bool), 1)
        scores = np.where(causal[None], np.float32(-np.inf), scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        out = (p @ v).transpose(1, 0, 2).reshape(n_t, d)
        return out @ layer.w_o

    def forward(self, token_ids: Sequence[int], hooks: ForwardHooks | None = None) -> np.ndarray:
        """Logits ``(T, vocab)`` for one token sequence."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("token_ids must be a non-empty 1-D sequence")
        if ids.size > self.config.seq_len:
            raise ValueError(f"sequence of length {ids.size} exceeds seq_len={self.config.seq_len}")
        if ids.min() < 0 or ids.max() >= self.config.vocab:
            raise ValueError(f"token id out of range for vocab={self.config.vocab}")
        h = self.embed[ids].astype(np.float32)
        for i, layer in enumerate(self.layers):
            h = h + self._attention(layer, rms_norm(h, layer.attn_norm))
            x = rms_norm(h, layer.ffn_norm)
            if hooks is not None:
                hooks.on_ffn_input(i, x)
            if isinstance(layer.ffn, MoeBlock):
                res = block_forward(layer.ffn, Tensor2(x))
                if hooks is not None:
                    hooks.on_routing(i, res.probs.data, res.ks)
                y = res.y.data
            else:
                y = ffn_forward(layer.ffn, Tensor2(x)).data
            if hooks is not None:
                hooks.on_ffn_output(i, y)
            h = h + y
        return rms_norm(h, self.final_norm) @ self.lm_head


# --- parameter and FLOP accounting -------------------------------------------


@dataclass(frozen=True)
class ParamFlopReport:
    total_params: int
    activated_params: float
    ffn_flops_per_token_dense: int
    ffn_flops_per_token_moe: float
    reduction_ratio: float
    ffn_total_params: int
    ffn_activated_params: float

    @property
    def model_reduction_ratio(self) -> float:
        """Activated-parameter reduction over the whole model, embeddings included."""
        return 1.0 - self.activated_params / self.total_params


def _non_ffn_params(c: ToyTransformerConfig) -> int:
    per_layer = 4 * c.d_h * c.d_h + 2 * c.d_h
    return 2 * c.vocab * c.d_h + c.n_layers * per_layer + c.d_h


def count_params_flops(config: ToyTransformerConfig, n_moe_layers: int, n_experts: int, k: float) -> ParamFlopReport:
    """Closed-form parameter and FFN FLOP counts.

    ``k`` may be fractional to represent the mean number of experts a
    dynamic policy activates. ``reduction_ratio`` is measured over the FFN
    portion (experts and routers); the whole-model figure is
    ``model_reduction_ratio``.
    """
    return count_params_flops_per_layer(config, {l: k for l in range(n_moe_layers)}, n_experts)


def count_params_flops_per_layer(config: ToyTransformerConfig, moe_k: dict[int, float], n_experts: int) -> ParamFlopReport:
    c = config
    if not 0 <= len(moe_k) <= c.n_layers:
        raise ValueError(f"{len(moe_k)} MoE layers for a {c.n_layers}-layer model")
    ffn = 3 * c.d_h * c.d_i
    router = c.d_h * n_experts
    ffn_flops = 2 * ffn
    total_ffn = c.n_layers * ffn + len(moe_k) * router
    active_ffn = (c.n_layers - len(moe_k)) * ffn
    flops_moe = (c.n_layers - len(moe_k)) * ffn_flops
    for k in moe_k.values():
        if not 1 <= k <= n_experts:
            raise ValueError(f"k={k} outside [1, {n_experts}]")
        active_ffn += k / n_experts * ffn + router
        flops_moe += k / n_experts * ffn_flops + 2 * router
    base = _non_ffn_params(c)
    return ParamFlopReport(
        total_params=base + total_ffn,
        activated_params=base + active_ffn,
        ffn_flops_per_token_dense=c.n_layers * ffn_flops,
        ffn_flops_per_token_moe=flops_moe,
        reduction_ratio=1.0 - active_ffn / total_ffn,
        ffn_total_params=total_ffn,
        ffn_activated_params=active_ffn,
    )


def model_param_count(model: ToyTransformer) -> int:
    """Stored parameters, counted from the actual arrays."""
    n = model.embed.size + model.final_norm.size + model.lm_head.size
    for layer in model.layers:
        n += sum(a.size for a in (layer.attn_norm, layer.w_q, layer.w_k, layer.w_v, layer.w_o, layer.ffn_norm))
        ffn = layer.ffn
        n += sum(p.data.size for p in ffn.params())
    return n
