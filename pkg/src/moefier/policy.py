"""Training-free layer-wise top-k policies.

The maximal routing weight of every token is profiled per MoE layer. Two
global quantiles (pooled over layers) and two local quantiles (per layer)
are compared to pick, for each layer, a static top-1/2/3 policy or a
token-wise dynamic policy:

    ============  ============  ============
                  a_i <= a      a_i > a
    ============  ============  ============
    b_i >= b      top-2         top-1
    b_i <  b      top-3         dynamic
    ============  ============  ============

where ``a = quantile(pooled, 1 - p_u)`` and ``b = quantile(pooled, p_e)``.
Equality falls into the top-2 row/column.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PROFILE_MAGIC = b"LDPR"
PROFILE_VERSION = 1


class CorruptFileError(ValueError):
    """A binary file is truncated or has an inconsistent header."""


@dataclass(frozen=True)
class LayerPolicy:
    """Static top-k or token-wise dynamic k for one MoE layer."""

    kind: str = "static"
    k: int = 2
    alpha_i: float | None = None
    beta_i: float | None = None

    def __post_init__(self):
        if self.kind == "static":
            if self.k < 1:
                raise ValueError(f"static policy needs k >= 1, got {self.k}")
        elif self.kind == "dynamic":
            if self.alpha_i is None or self.beta_i is None:
                raise ValueError("dynamic policy needs alpha_i and beta_i")
            if not self.beta_i < self.alpha_i:
                raise ValueError(f"dynamic policy needs beta_i < alpha_i, got {self.beta_i} >= {self.alpha_i}")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def static(cls, k: int) -> "LayerPolicy":
        return cls("static", int(k))

    @classmethod
    def dynamic(cls, alpha_i: float, beta_i: float) -> "LayerPolicy":
        return cls("dynamic", 0, float(alpha_i), float(beta_i))

    @property
    def label(self) -> str:
        return "dynamic" if self.kind == "dynamic" else f"top{self.k}"

    def to_dict(self) -> dict:
        if self.kind == "dynamic":
            return {"policy": "dynamic", "alpha_i": self.alpha_i, "beta_i": self.beta_i}
        return {"policy": self.label, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPolicy":
        if d["policy"] == "dynamic":
            return cls.dynamic(d["alpha_i"], d["beta_i"])
        return cls.static(d["k"])

    def k_per_token(self, max_weights: np.ndarray) -> np.ndarray:
        """k for each token given its maximal routing weight."""
        max_weights = np.asarray(max_weights)
        if self.kind == "static":
            # Static layers skip the threshold comparison entirely.
            return np.full(max_weights.shape, self.k, dtype=np.intp)
        return dynamic_k(max_weights, self.alpha_i, self.beta_i)


def dynamic_k(w_m, alpha_i: float, beta_i: float):
    """1 if ``w_m >= alpha_i``, 3 if ``w_m <= beta_i``, else 2. Vectorised over ``w_m``."""
    if not beta_i < alpha_i:
        raise ValueError(f"dynamic_k needs beta_i < alpha_i, got {beta_i}, {alpha_i}")
    w = np.asarray(w_m)
    k = np.where(w >= alpha_i, 1, np.where(w <= beta_i, 3, 2)).astype(np.intp)
    return int(k) if k.ndim == 0 else k


def quantile(samples, q: float) -> float:
    """Empirical quantile, linear interpolation between order statistics.

    The sorted samples ``x_1 <= ... <= x_n`` are read at 1-based position
    ``1 + q*(n-1)``.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile level must be in [0, 1], got {q}")
    xs = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = xs.size
    if n == 0:
        raise ValueError("quantile of empty sample")
    pos = q * (n - 1)
    lo = int(np.floor(pos))
    frac = pos - lo
    if lo + 1 >= n:
        return float(xs[-1])
    return float(xs[lo] + frac * (xs[lo + 1] - xs[lo]))


@dataclass
class RoutingProfile:
    """Maximal routing weight per token, collected per MoE layer."""

    n_experts: int
    samples: dict[int, np.ndarray] = field(default_factory=dict)
    corpus_id: str = ""

    def add(self, layer: int, max_weights: np.ndarray) -> None:
        w = np.asarray(max_weights, dtype=np.float32).ravel()
        lo = 1.0 / self.n_experts - 1e-6
        if w.size and (w.min() < lo or w.max() > 1.0 + 1e-6):
            raise ValueError(f"layer {layer}: maximal routing weights outside [1/N, 1]")
        prev = self.samples.get(layer)
        self.samples[layer] = w if prev is None else np.concatenate([prev, w])

    @property
    def layers(self) -> list[int]:
        return sorted(self.samples)

    def counts(self) -> dict[int, int]:
        return {l: int(self.samples[l].size) for l in self.layers}

    def pooled(self) -> np.ndarray:
        return np.concatenate([self.samples[l] for l in self.layers])


@dataclass(frozen=True)
class QuantileThresholds:
    p_u: float
    p_e: float
    alpha: float
    beta: float
    alpha_i: dict[int, float]
    beta_i: dict[int, float]


def compute_thresholds(profile: RoutingProfile, p_u: float, p_e: float) -> QuantileThresholds:
    if not (0 < p_u < 1 and 0 < p_e < 1 and p_u + p_e <= 1):
        raise ValueError(f"need 0 < p_u, p_e < 1 and p_u + p_e <= 1, got p_u={p_u}, p_e={p_e}")
    if not profile.samples:
        raise ValueError("empty routing profile")
    for l, s in profile.samples.items():
        if s.size == 0:
            raise ValueError(f"layer {l} has no routing samples")
    pooled = profile.pooled()
    return QuantileThresholds(
        p_u=p_u,
        p_e=p_e,
        alpha=quantile(pooled, 1 - p_u),
        beta=quantile(pooled, p_e),
        alpha_i={l: quantile(profile.samples[l], 1 - p_u) for l in profile.layers},
        beta_i={l: quantile(profile.samples[l], p_e) for l in profile.layers},
    )


def table_policy(alpha_i: float, beta_i: float, alpha: float, beta: float) -> LayerPolicy:
    uneven = alpha_i > alpha
    even = beta_i < beta
    if uneven and even:
        return LayerPolicy.dynamic(alpha_i, beta_i)
    if uneven:
        return LayerPolicy.static(1)
    if even:
        return LayerPolicy.static(3)
    return LayerPolicy.static(2)


def decide_policies(profile: RoutingProfile, p_u: float, p_e: float) -> tuple[dict[int, LayerPolicy], QuantileThresholds]:
    th = compute_thresholds(profile, p_u, p_e)
    if th.alpha == th.beta:
        log.warning("degenerate routing profile (alpha == beta == %g); using top-2 everywhere", th.alpha)
        return {l: LayerPolicy.static(2) for l in profile.layers}, th
    policies = {l: table_policy(th.alpha_i[l], th.beta_i[l], th.alpha, th.beta) for l in profile.layers}
    return policies, th


def profile_routing(model, corpus: Iterable[Sequence[int]]) -> RoutingProfile:
    """Run ``model`` over ``corpus`` and record ``max_j r_ij`` per token and MoE layer."""
    moe_layers = model.moe_layers()
    if not moe_layers:
        raise ValueError("model has no MoE layers to profile")
    n_experts = {model.layers[l].ffn.n_experts for l in moe_layers}
    if len(n_experts) != 1:
        raise ValueError(f"MoE layers disagree on expert count: {sorted(n_experts)}")
    profile = RoutingProfile(n_experts.pop(), corpus_id=getattr(corpus, "corpus_id", ""))

    class _Recorder:
        def on_ffn_input(self, layer, x):
            pass

        def on_ffn_output(self, layer, y):
            pass

        def on_routing(self, layer, probs, ks):
            profile.add(layer, probs.max(axis=1))

    n_seq = 0
    for seq in corpus:
        model.forward(seq, hooks=_Recorder())
        n_seq += 1
    if n_seq == 0:
        raise ValueError("empty corpus")
    return profile


# --- files -------------------------------------------------------------------


def save_profile(path, profile: RoutingProfile) -> None:
    cid = profile.corpus_id.encode("utf-8")
    with open(path, "wb") as f:
        f.write(PROFILE_MAGIC)
        f.write(struct.pack("<IIII", PROFILE_VERSION, len(profile.samples), profile.n_experts, len(cid)))
        f.write(cid)
        for l in profile.layers:
            s = np.ascontiguousarray(profile.samples[l], dtype="<f4")
            f.write(struct.pack("<IQ", l, s.size))
            f.write(s.tobytes())


def load_profile(path) -> RoutingProfile:
    buf = Path(path).read_bytes()
    if buf[:4] != PROFILE_MAGIC:
        raise CorruptFileError(f"{path}: not a routing profile (bad magic)")
    try:
        version, n_layers, n_experts, cid_len = struct.unpack_from("<IIII", buf, 4)
        if version != PROFILE_VERSION:
            raise CorruptFileError(f"{path}: unsupported profile version {version}")
        off = 20
        cid = buf[off:off + cid_len].decode("utf-8")
        off += cid_len
        profile = RoutingProfile(n_experts, corpus_id=cid)
        for _ in range(n_layers):
            layer, count = struct.unpack_from("<IQ", buf, off)
            off += 12
            nbytes = 4 * count
            if off + nbytes > len(buf):
                raise CorruptFileError(f"{path}: truncated samples for layer {layer}")
            profile.samples[layer] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32)
            off += nbytes
    except struct.error as exc:
        raise CorruptFileError(f"{path}: truncated header") from exc
    if off != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - off} trailing bytes")
    return profile


def policies_to_records(policies: dict[int, LayerPolicy], th: QuantileThresholds) -> list[dict]:
    records = []
    for l in sorted(policies):
        rec = {"layer": l}
        rec.update(policies[l].to_dict())
        rec.update({"alpha": th.alpha, "beta": th.beta, "p_u": th.p_u, "p_e": th.p_e})
        records.append(rec)
    return records


def save_policies(path, policies: dict[int, LayerPolicy], th: QuantileThresholds) -> None:
    Path(path).write_text(json.dumps(policies_to_records(policies, th), indent=2) + "\n")


def load_policies(path) -> dict[int, LayerPolicy]:
    records = json.loads(Path(path).read_text())
    return {int(r["layer"]): LayerPolicy.from_dict(r) for r in records}
