"""Command-line entry point: capture, train, assemble, profile, decide-policy, bench, sweep."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench as B
from .capture import capture_layers, load_corpus, load_dataset, save_corpus, save_dataset, synthetic_corpus
from .checkpoint import block_path, load_block, load_model, save_block, save_model
from .distill import TrainConfig, train_moe_block
from .model import DenseFfn, MoeBlock, ToyTransformer, ToyTransformerConfig, init_moe_block
from .policy import (CorruptFileError, LayerPolicy, decide_policies, load_policies, load_profile, profile_routing,
                     save_policies, save_profile)

log = logging.getLogger("moefier")


def parse_layers(text: str) -> list[int]:
    """``"3"``, ``"1,4,7"``, ``"20-31"`` or ``"20..31"`` (ranges inclusive)."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        for sep in ("..", "-"):
            if sep in part:
                lo, hi = part.split(sep, 1)
                out.extend(range(int(lo), int(hi) + 1))
                break
        else:
            out.append(int(part))
    return out


def _dense_ffn(model: ToyTransformer, layer: int) -> DenseFfn:
    if not 0 <= layer < model.config.n_layers:
        raise ValueError(f"layer {layer} out of range for {model.config.n_layers} layers")
    ffn = model.layers[layer].ffn
    if isinstance(ffn, MoeBlock):
        raise ValueError(f"layer {layer} of the teacher is already an MoE block")
    return ffn


def _load_blocks(blocks_dir, layers) -> dict[int, MoeBlock]:
    blocks = {}
    for l in layers:
        path = block_path(blocks_dir, l)
        if not path.exists():
            raise FileNotFoundError(f"no trained block for layer {l} at {path}")
        blocks[l] = load_block(path)[0]
    return blocks


def cmd_init_model(a):
    cfg = ToyTransformerConfig(a.n_layers, a.d_h, a.d_i, a.n_heads, a.vocab, a.seq_len)
    save_model(a.out, ToyTransformer.random(cfg, a.seed))
    print(f"wrote {a.out}")


def cmd_make_corpus(a):
    save_corpus(a.out, synthetic_corpus(a.n_seqs, a.seq_len, a.vocab, a.seed))
    print(f"wrote {a.out}")


def cmd_capture(a):
    model = load_model(a.model)
    corpus = load_corpus(a.corpus)
    layers = parse_layers(a.layers)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for l, ds in capture_layers(model, corpus, layers, a.max_rows).items():
        path = out / f"layer_{l:03d}.ldhs"
        save_dataset(path, ds)
        print(f"layer {l}: {len(ds)} rows -> {path}")


def cmd_train(a):
    model = load_model(a.teacher)
    teacher = _dense_ffn(model, a.layer)
    data = load_dataset(a.data)
    if data.layer_index != a.layer:
        log.warning("dataset was captured at layer %d, training layer %d", data.layer_index, a.layer)
    block = init_moe_block(teacher, a.experts, a.init, a.seed, LayerPolicy.static(a.k))
    cfg = TrainConfig(steps=a.steps, batch_size=a.batch, learning_rate=a.lr, alpha_aux=a.alpha,
                      k_train=a.k, seed=a.seed, loss_mode=a.loss_mode)
    block, report = train_moe_block(teacher, block, data, cfg)
    save_block(a.out, block, a.layer, train=vars(cfg) | {"init": a.init})
    report_path = a.report or str(Path(a.out).with_suffix(".csv"))
    report.to_csv(report_path)
    final = f"{report.l_mse[-1]:.6g}" if report.l_mse else "n/a"
    print(f"layer {a.layer}: final l_mse={final}, block -> {a.out}, report -> {report_path}")


def cmd_assemble(a):
    dense = load_model(a.dense)
    layers = parse_layers(a.layers)
    blocks = _load_blocks(a.blocks_dir, layers)
    n_exp = {b.n_experts for b in blocks.values()} or {2}
    if len(n_exp) > 1:
        raise ValueError(f"blocks disagree on expert count: {sorted(n_exp)}")
    policies = load_policies(a.policy) if a.policy else None
    spec = B.AssemblySpec(layers, n_exp.pop(), a.k, policies)
    model = B.assemble(dense, blocks, spec)
    save_model(a.out, model, {"dense_source": str(Path(a.dense).resolve())})
    print(f"wrote {a.out} with MoE layers {model.moe_layers()}")


def cmd_profile(a):
    model = load_model(a.model)
    corpus = load_corpus(a.corpus).chunked(model.config.seq_len)
    prof = profile_routing(model, corpus)
    save_profile(a.out, prof)
    print(f"profiled layers {prof.layers} ({sum(prof.counts().values())} samples) -> {a.out}")


def cmd_decide_policy(a):
    prof = load_profile(a.profile)
    policies, th = decide_policies(prof, a.pu, a.pe)
    save_policies(a.out, policies, th)
    for l in sorted(policies):
        print(f"layer {l}: {policies[l].label} (alpha_i={th.alpha_i[l]:.4f}, beta_i={th.beta_i[l]:.4f})")
    print(f"global alpha={th.alpha:.4f} beta={th.beta:.4f} -> {a.out}")


def cmd_bench(a):
    model = load_model(a.model)
    dense_path = a.dense or model.source
    dense = load_model(dense_path) if dense_path else model
    if dense is model and model.moe_layers():
        log.warning("no dense reference available; fidelity is measured against the model itself")
    policies = load_policies(a.policy) if a.policy else None
    rep = B.bench(model, load_corpus(a.corpus), dense, policies, runs=a.runs)
    B.write_csv(a.report, [rep.row()])
    print(json.dumps({k: v for k, v in rep.row().items() if not k.startswith("mse_layer_")}, indent=2))


def cmd_sweep(a):
    dense = load_model(a.dense)
    m_values = parse_layers(a.m)
    needed = sorted(set().union(*(B.top_layers(dense.config.n_layers, m) for m in m_values)))
    blocks = _load_blocks(a.blocks_dir, needed)
    rows = B.sweep(dense, blocks, m_values, load_corpus(a.corpus), a.k, runs=a.runs)
    B.write_csv(a.report, rows)
    for r in rows:
        print(f"m={r['m']:>3}  flops/token={r['ffn_flops_per_token_moe']:.4g}  "
              f"ppl_ratio={r['perplexity_ratio']:.4f}  tok/s={r['tokens_per_sec']:.1f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moefier", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init-model", help="write a randomly initialised dense host model")
    s.add_argument("--n-layers", type=int, default=8)
    s.add_argument("--d-h", type=int, default=64)
    s.add_argument("--d-i", type=int, default=256)
    s.add_argument("--n-heads", type=int, default=4)
    s.add_argument("--vocab", type=int, default=256)
    s.add_argument("--seq-len", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("make-corpus", help="write a synthetic pre-tokenized corpus")
    s.add_argument("--n-seqs", type=int, default=100)
    s.add_argument("--seq-len", type=int, default=64)
    s.add_argument("--vocab", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_corpus)

    s = sub.add_parser("capture", help="capture FFN-input hidden states per layer")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--layers", required=True)
    s.add_argument("--max-rows", type=int, default=100_000)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_capture)

    s = sub.add_parser("train", help="distill one MoE block from a dense FFN")
    s.add_argument("--teacher", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--experts", type=int, default=4)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--alpha", type=float, default=0.01)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--loss-mode", choices=("fixed", "adaptive"), default="adaptive")
    s.add_argument("--init", choices=("split", "random"), default="split")
    s.add_argument("--report", help="CSV training log (default: next to --out)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("assemble", help="replace FFNs of selected layers with trained blocks")
    s.add_argument("--dense", required=True)
    s.add_argument("--blocks-dir", required=True)
    s.add_argument("--layers", required=True)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--policy", help="policy JSON from decide-policy")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_assemble)

    s = sub.add_parser("profile", help="record maximal routing weights per MoE layer")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("decide-policy", help="derive layer-wise top-k policies from a profile")
    s.add_argument("--profile", required=True)
    s.add_argument("--pu", type=float, default=0.25)
    s.add_argument("--pe", type=float, default=0.25)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_decide_policy)

    s = sub.add_parser("bench", help="throughput, fidelity and FLOP report for one model")
    s.add_argument("--model", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--policy")
    s.add_argument("--dense", help="dense reference (default: the one recorded at assembly)")
    s.add_argument("--runs", type=int, default=3)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="bench the m highest layers MoEfied for each m")
    s.add_argument("--dense", required=True)
    s.add_argument("--blocks-dir", required=True)
    s.add_argument("--m", required=True, help="e.g. 0..8")
    s.add_argument("--corpus", required=True)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--runs", type=int, default=3)
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, OSError, CorruptFileError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
