"""Assemble partially MoEfied models and measure their cost/fidelity trade-off."""

from __future__ import annotations

import csv
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .capture import CaptureHooks, Corpus
from .model import (ForwardHooks, MoeBlock, ParamFlopReport, ToyTransformer, block_forward,
                    count_params_flops_per_layer, ffn_forward)
from .policy import LayerPolicy
from .tensor import Tensor2

log = logging.getLogger(__name__)


@dataclass
class AssemblySpec:
    moefied_layers: list[int]
    n_experts: int
    default_k: int = 2
    policies: dict[int, LayerPolicy] | None = None

    def validate(self, n_layers: int) -> None:
        if len(set(self.moefied_layers)) != len(self.moefied_layers):
            raise ValueError(f"duplicate layer indices in {self.moefied_layers}")
        for l in self.moefied_layers:
            if not 0 <= l < n_layers:
                raise ValueError(f"layer {l} out of range for {n_layers} layers")
        if not 1 <= self.default_k <= self.n_experts:
            raise ValueError(f"default_k={self.default_k} outside [1, {self.n_experts}]")


def top_layers(n_layers: int, m: int) -> list[int]:
    """The ``m`` highest-index layers (those nearest the output)."""
    if not 0 <= m <= n_layers:
        raise ValueError(f"m={m} outside [0, {n_layers}]")
    return list(range(n_layers - m, n_layers))


def assemble(dense: ToyTransformer, blocks: dict[int, MoeBlock], spec: AssemblySpec) -> ToyTransformer:
    """Swap the FFNs of ``spec.moefied_layers`` for trained blocks; everything else is shared as-is."""
    spec.validate(dense.config.n_layers)
    model = dense.copy()
    for l in spec.moefied_layers:
        if l not in blocks:
            raise KeyError(f"no trained block for layer {l}")
        block = blocks[l]
        teacher = dense.layers[l].ffn
        if isinstance(teacher, MoeBlock):
            raise ValueError(f"layer {l} of the dense model is already an MoE block")
        if block.d_h != teacher.d_h or block.n_experts != spec.n_experts:
            raise ValueError(f"layer {l}: block shape (d_h={block.d_h}, N={block.n_experts}) "
                             f"does not match d_h={teacher.d_h}, N={spec.n_experts}")
        if block.d_expert * block.n_experts != teacher.d_i:
            raise ValueError(f"layer {l}: block intermediate size {block.n_experts}x{block.d_expert} "
                             f"!= teacher d_i {teacher.d_i}")
        policy = (spec.policies or {}).get(l, LayerPolicy.static(spec.default_k))
        model.layers[l].ffn = block.with_policy(policy)
    return model


def apply_policies(model: ToyTransformer, policies: dict[int, LayerPolicy]) -> ToyTransformer:
    out = model.copy()
    for l, p in policies.items():
        ffn = out.layers[l].ffn
        if not isinstance(ffn, MoeBlock):
            raise ValueError(f"policy given for layer {l}, which is not an MoE layer")
        out.layers[l].ffn = ffn.with_policy(p)
    return out


@dataclass
class BenchReport:
    tokens_per_sec: float
    layer_mse: dict[int, float]
    perplexity: float
    dense_perplexity: float
    flops: ParamFlopReport
    mean_active_experts: dict[int, float] = field(default_factory=dict)
    moe_layers: list[int] = field(default_factory=list)

    @property
    def perplexity_ratio(self) -> float:
        return self.perplexity / self.dense_perplexity

    @property
    def mse_sum(self) -> float:
        return float(sum(self.layer_mse.values()))

    def row(self, **extra) -> dict:
        r = dict(extra)
        r.update({
            "moe_layers": " ".join(map(str, self.moe_layers)),
            "tokens_per_sec": self.tokens_per_sec,
            "perplexity": self.perplexity,
            "dense_perplexity": self.dense_perplexity,
            "perplexity_ratio": self.perplexity_ratio,
            "ffn_mse_sum": self.mse_sum,
            "total_params": self.flops.total_params,
            "activated_params": self.flops.activated_params,
            "ffn_flops_per_token_dense": self.flops.ffn_flops_per_token_dense,
            "ffn_flops_per_token_moe": self.flops.ffn_flops_per_token_moe,
            "reduction_ratio": self.flops.reduction_ratio,
            "mean_active_experts": (float(np.mean(list(self.mean_active_experts.values())))
                                    if self.mean_active_experts else 0.0),
        })
        for l in sorted(self.layer_mse):
            r[f"mse_layer_{l}"] = self.layer_mse[l]
        return r


class _ExpertCounter(ForwardHooks):
    def __init__(self):
        self.total: dict[int, int] = {}
        self.tokens: dict[int, int] = {}

    def on_routing(self, layer, probs, ks):
        self.total[layer] = self.total.get(layer, 0) + int(np.sum(ks))
        self.tokens[layer] = self.tokens.get(layer, 0) + len(ks)

    def means(self) -> dict[int, float]:
        return {l: self.total[l] / self.tokens[l] for l in sorted(self.total)}


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def perplexity(model: ToyTransformer, corpus: Iterable[Sequence[int]], hooks: ForwardHooks | None = None) -> float:
    nll, count = 0.0, 0
    for seq in corpus:
        logits = model.forward(seq, hooks)
        if len(seq) < 2:
            continue
        lp = _log_softmax(logits[:-1])
        nll -= lp[np.arange(len(seq) - 1), np.asarray(seq[1:])].sum()
        count += len(seq) - 1
    if count == 0:
        raise ValueError("corpus has no sequence with at least two tokens")
    return float(np.exp(nll / count))


def throughput(model: ToyTransformer, corpus: Sequence[Sequence[int]], runs: int = 3) -> float:
    """Median tokens/sec over ``runs`` timed passes, after one warm-up pass."""
    runs = max(runs, 3)
    n_tokens = sum(len(s) for s in corpus)
    for seq in corpus:
        model.forward(seq)
    rates = []
    for _ in range(runs):
        t0 = time.perf_counter()
        for seq in corpus:
            model.forward(seq)
        rates.append(n_tokens / (time.perf_counter() - t0))
    return statistics.median(rates)


def layer_mse(model: ToyTransformer, dense: ToyTransformer, corpus: Corpus, max_rows: int = 4096) -> dict[int, float]:
    """Teacher-vs-student FFN MSE per layer on FFN inputs captured from the dense model."""
    n_layers = dense.config.n_layers
    hooks = CaptureHooks(range(n_layers))
    for seq in corpus:
        if hooks.count(0) >= max_rows:
            break
        dense.forward(seq, hooks)
    out = {}
    for l in range(n_layers):
        x = Tensor2(hooks.rows(l, dense.config.d_h)[:max_rows])
        teacher = dense.layers[l].ffn
        student = model.layers[l].ffn
        if isinstance(teacher, MoeBlock):
            raise ValueError(f"reference model layer {l} is not dense")
        target = ffn_forward(teacher, x).data.astype(np.float64)
        if isinstance(student, MoeBlock):
            pred = block_forward(student, x).y.data.astype(np.float64)
        else:
            pred = ffn_forward(student, x).data.astype(np.float64)
        out[l] = float(np.mean((pred - target) ** 2))
    return out


def flop_report(model: ToyTransformer, mean_active: dict[int, float]) -> ParamFlopReport:
    moe = model.moe_layers()
    n_exp = {model.layers[l].ffn.n_experts for l in moe}
    if len(n_exp) > 1:
        raise ValueError(f"MoE layers disagree on expert count: {sorted(n_exp)}")
    ks = {}
    for l in moe:
        pol = model.layers[l].ffn.policy
        ks[l] = pol.k if pol.kind == "static" else mean_active.get(l, 2.0)
    return count_params_flops_per_layer(model.config, ks, n_exp.pop() if n_exp else 2)


def bench(model: ToyTransformer, corpus: Iterable[Sequence[int]], dense: ToyTransformer | None = None,
          policies: dict[int, LayerPolicy] | None = None, runs: int = 3, max_rows: int = 4096,
          measure_throughput: bool = True) -> BenchReport:
    dense = dense or model
    if model.config != dense.config:
        raise ValueError("model and dense reference have different configs")
    if policies:
        model = apply_policies(model, policies)
    corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
    corpus = corpus.chunked(model.config.seq_len)
    if not corpus:
        raise ValueError("empty corpus")
    counter = _ExpertCounter()
    ppl = perplexity(model, corpus, counter)
    ppl_dense = ppl if dense is model else perplexity(dense, corpus)
    tps = throughput(model, corpus, runs) if measure_throughput else float("nan")
    means = counter.means()
    return BenchReport(
        tokens_per_sec=tps,
        layer_mse=layer_mse(model, dense, corpus, max_rows),
        perplexity=ppl,
        dense_perplexity=ppl_dense,
        flops=flop_report(model, means),
        mean_active_experts=means,
        moe_layers=model.moe_layers(),
    )


def sweep(dense: ToyTransformer, blocks: dict[int, MoeBlock], m_values: Iterable[int], corpus,
          default_k: int = 2, runs: int = 3, max_rows: int = 4096, measure_throughput: bool = True) -> list[dict]:
    """One bench row per ``m``, MoEfying the ``m`` highest-index layers."""
    rows = []
    n_exp = {b.n_experts for b in blocks.values()}
    if len(n_exp) > 1:
        raise ValueError(f"blocks disagree on expert count: {sorted(n_exp)}")
    n_exp = n_exp.pop() if n_exp else 2
    for m in m_values:
        layers = top_layers(dense.config.n_layers, m)
        model = assemble(dense, blocks, AssemblySpec(layers, n_exp, default_k))
        rep = bench(model, corpus, dense, runs=runs, max_rows=max_rows, measure_throughput=measure_throughput)
        log.info("m=%d ppl_ratio=%.4f mse_sum=%.4g tok/s=%.1f", m, rep.perplexity_ratio, rep.mse_sum, rep.tokens_per_sec)
        rows.append(rep.row(m=m))
    return rows


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    fields = list(rows[0])
    for r in rows[1:]:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
