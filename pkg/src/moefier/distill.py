"""Layer-wise distillation of one MoE block against its frozen dense FFN."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .capture import HiddenStateDataset
from .model import DenseFfn, Expert, MoeBlock, Router, ffn_forward, moe_forward_detailed
from .tensor import GradTape, Tensor2

log = logging.getLogger(__name__)

LOSS_MODES = ("fixed", "adaptive")


class TrainingDivergedError(FloatingPointError):
    pass


def dispatch_fractions(mask: np.ndarray) -> np.ndarray:
    """Share of dispatch slots each expert received; sums to 1."""
    counts = mask.sum(axis=0).astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty batch")
    return counts / total


def aux_loss(routing_weights: Tensor2, dispatch, k: int | None = None) -> Tensor2:
    """Load-balancing penalty ``sum_i f_i * P_i``.

    ``dispatch`` is either a boolean ``(tokens, N)`` selection mask or a
    ``(tokens, k)`` array of expert indices. ``f_i`` is the fraction of
    dispatch slots (``tokens * k`` in total) that went to expert ``i``;
    ``P_i`` is the mean routing weight of expert ``i`` over the batch and
    carries the gradient.
    """
    n, n_exp = routing_weights.shape
    if n == 0:
        raise ValueError("aux_loss: empty batch")
    dispatch = np.asarray(dispatch)
    if dispatch.dtype == bool:
        if dispatch.shape != (n, n_exp):
            raise ValueError(f"dispatch mask shape {dispatch.shape} != {(n, n_exp)}")
        mask = dispatch
    else:
        if dispatch.ndim != 2 or dispatch.shape[0] != n:
            raise ValueError(f"dispatch index shape {dispatch.shape} does not match {n} tokens")
        if k is not None and dispatch.shape[1] != k:
            raise ValueError(f"dispatch has {dispatch.shape[1]} slots per token, expected k={k}")
        mask = np.zeros((n, n_exp), dtype=bool)
        np.put_along_axis(mask, dispatch, True, axis=1)
    f = Tensor2(dispatch_fractions(mask).reshape(1, -1), dtype=routing_weights.dtype)
    return T.sum_all(T.mul(T.mean_rows(routing_weights), f))


def combined_loss(l_mse: Tensor2, l_aux: Tensor2, alpha: float, mode: str = "adaptive") -> Tensor2:
    """``fixed``: mse + alpha*aux. ``adaptive``: mse + alpha*|mse|*aux with |mse| held constant."""
    if mode == "fixed":
        coef = alpha
    elif mode == "adaptive":
        coef = alpha * abs(l_mse.item())
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    return T.add(l_mse, T.scale(l_aux, coef))


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    learning_rate: float = 1e-4
    alpha_aux: float = 0.0
    k_train: int = 2
    seed: int = 0
    loss_mode: str = "adaptive"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.alpha_aux < 0:
            raise ValueError("alpha_aux must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")


@dataclass
class TrainReport:
    n_experts: int
    l_mse: list[float] = field(default_factory=list)
    l_aux: list[float] = field(default_factory=list)
    l_tot: list[float] = field(default_factory=list)
    dispatch: list[np.ndarray] = field(default_factory=list)  # per-step slot counts per expert

    @property
    def final_loss(self) -> float | None:
        return self.l_tot[-1] if self.l_tot else None

    def dispatch_counts(self, last: int | None = None) -> np.ndarray:
        rows = self.dispatch[-last:] if last else self.dispatch
        if not rows:
            return np.zeros(self.n_experts, dtype=np.int64)
        return np.sum(rows, axis=0)

    def dispatch_cv(self, last: int | None = None) -> float:
        """Coefficient of variation of per-expert dispatch counts."""
        c = self.dispatch_counts(last).astype(np.float64)
        return float(c.std() / c.mean()) if c.mean() > 0 else 0.0

    def smoothed_mse(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.l_mse, dtype=np.float64)
        n = len(x) // window
        return x[: n * window].reshape(n, window).mean(axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "l_mse", "l_aux", "l_tot"] + [f"frac_expert_{j}" for j in range(self.n_experts)])
            for i, (a, b, c, d) in enumerate(zip(self.l_mse, self.l_aux, self.l_tot, self.dispatch)):
                fr = d / d.sum()
                w.writerow([i, repr(a), repr(b), repr(c)] + [repr(float(v)) for v in fr])


def _batches(n_rows: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches; reshuffles at each epoch boundary."""
    perm = rng.permutation(n_rows)
    pos = 0
    while True:
        take = []
        need = batch_size
        while need:
            if pos == n_rows:
                perm = rng.permutation(n_rows)
                pos = 0
            chunk = perm[pos:pos + need]
            take.append(chunk)
            pos += len(chunk)
            need -= len(chunk)
        yield np.concatenate(take)


def _rebuild(block: MoeBlock, arrays: list[np.ndarray]) -> MoeBlock:
    router = Router(Tensor2(arrays[0]))
    experts = []
    for j, e in enumerate(block.experts):
        a = arrays[1 + 3 * j: 4 + 3 * j]
        experts.append(Expert(Tensor2(a[0]), Tensor2(a[1]), Tensor2(a[2]), e.source_slice))
    return MoeBlock(router, tuple(experts), block.policy)


def train_moe_block(teacher: DenseFfn, block: MoeBlock, data: HiddenStateDataset,
                    cfg: TrainConfig) -> tuple[MoeBlock, TrainReport]:
    """Fit ``block`` to reproduce ``teacher`` on the captured hidden states.

    The teacher is only ever read. Router and expert weights are updated
    with Adam on ``L_mse + coef * L_aux``.
    """
    if data.d_h != teacher.d_h:
        raise ValueError(f"dataset width {data.d_h} != teacher d_h {teacher.d_h}")
    if block.d_h != teacher.d_h:
        raise ValueError(f"block d_h {block.d_h} != teacher d_h {teacher.d_h}")
    if block.d_expert * block.n_experts != teacher.d_i:
        log.warning("block intermediate size %d x %d differs from teacher d_i %d",
                    block.n_experts, block.d_expert, teacher.d_i)
    if not 1 <= cfg.k_train <= block.n_experts:
        raise ValueError(f"k_train={cfg.k_train} outside [1, {block.n_experts}]")
    if len(data) == 0:
        raise ValueError("empty dataset")

    report = TrainReport(block.n_experts)
    if cfg.steps == 0:
        return block, report

    rng = np.random.default_rng(cfg.seed)
    arrays = [np.array(p.data) for p in block.params()]
    opt = Adam(arrays, lr=cfg.learning_rate)
    batches = _batches(len(data), cfg.batch_size, rng)
    rows = data.rows

    for step in range(cfg.steps):
        idx = next(batches)
        x = Tensor2(rows[idx])
        target = ffn_forward(teacher, x)
        current = _rebuild(block, arrays)
        params = current.params()
        for p in params:
            p.requires_grad = True
        try:
            with GradTape() as tape:
                out = moe_forward_detailed(current, x, cfg.k_train)
                l_mse = T.mse(out.y, target)
                l_aux = aux_loss(out.probs, out.mask)
                l_tot = combined_loss(l_mse, l_aux, cfg.alpha_aux, cfg.loss_mode)
        except T.NonFiniteError as exc:
            last = report.l_mse[-5:]
            raise TrainingDivergedError(f"non-finite value at step {step}; recent l_mse={last}") from exc
        grads = T.backward(tape, l_tot, params)
        opt.step([grads[p] for p in params])
        report.l_mse.append(l_mse.item())
        report.l_aux.append(l_aux.item())
        report.l_tot.append(l_tot.item())
        report.dispatch.append(out.mask.sum(axis=0).astype(np.int64))
        if not all(np.isfinite(a).all() for a in arrays):
            raise TrainingDivergedError(f"non-finite weights after step {step}; l_mse={report.l_mse[-1]}")

    return _rebuild(block, arrays), report

