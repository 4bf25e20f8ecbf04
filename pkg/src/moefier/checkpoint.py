"""Binary checkpoint container shared by dense models, MoEfied models and single blocks.

Layout (little-endian)::

    b"LDMO" | u32 version | u32 header_len | header JSON (utf-8)
    u32 tensor_count
    repeated: u16 name_len | name | u32 ndim | u64 dims[ndim] | f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import DecoderLayer, DenseFfn, Expert, MoeBlock, Router, ToyTransformer, ToyTransformerConfig
from .policy import CorruptFileError, LayerPolicy
from .tensor import Tensor2

MAGIC = b"LDMO"
VERSION = 1

_ATTN = ("attn_norm", "w_q", "w_k", "w_v", "w_o", "ffn_norm")


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, meta_len = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CorruptFileError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        if off + meta_len > len(buf):
            raise CorruptFileError(f"{path}: truncated header")
        header = json.loads(buf[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if off + 4 * n > len(buf):
                raise CorruptFileError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: malformed checkpoint ({exc})") from exc
    if off != len(buf):
        raise CorruptFileError(f"{path}: {len(buf) - off} trailing bytes")
    return header, tensors


def _block_meta(block: MoeBlock) -> dict:
    return {
        "n_experts": block.n_experts,
        "d_expert": block.d_expert,
        "policy": block.policy.to_dict(),
        "source_slices": [list(e.source_slice) for e in block.experts],
    }


def _block_tensors(block: MoeBlock, prefix: str) -> dict[str, np.ndarray]:
    out = {f"{prefix}router": block.router.w.data}
    for j, e in enumerate(block.experts):
        out[f"{prefix}experts.{j}.w_up"] = e.w_up.data
        out[f"{prefix}experts.{j}.w_gate"] = e.w_gate.data
        out[f"{prefix}experts.{j}.w_down"] = e.w_down.data
    return out


def _block_from(meta: dict, tensors: dict, prefix: str) -> MoeBlock:
    try:
        experts = []
        for j, sl in enumerate(meta["source_slices"]):
            experts.append(Expert(Tensor2(tensors[f"{prefix}experts.{j}.w_up"]),
                                  Tensor2(tensors[f"{prefix}experts.{j}.w_gate"]),
                                  Tensor2(tensors[f"{prefix}experts.{j}.w_down"]), tuple(sl)))
        return MoeBlock(Router(Tensor2(tensors[f"{prefix}router"])), tuple(experts),
                        LayerPolicy.from_dict(meta["policy"]))
    except KeyError as exc:
        raise CorruptFileError(f"missing MoE tensor or field {exc}") from exc


def model_tensors(model: ToyTransformer) -> tuple[dict, dict[str, np.ndarray]]:
    tensors = {"embed": model.embed}
    moe = {}
    for i, layer in enumerate(model.layers):
        for name in _ATTN:
            tensors[f"layers.{i}.{name}"] = getattr(layer, name)
        if isinstance(layer.ffn, MoeBlock):
            moe[str(i)] = _block_meta(layer.ffn)
            tensors.update(_block_tensors(layer.ffn, f"layers.{i}.moe."))
        else:
            tensors[f"layers.{i}.ffn.w_up"] = layer.ffn.w_up.data
            tensors[f"layers.{i}.ffn.w_gate"] = layer.ffn.w_gate.data
            tensors[f"layers.{i}.ffn.w_down"] = layer.ffn.w_down.data
    tensors["final_norm"] = model.final_norm
    tensors["lm_head"] = model.lm_head
    header = {"kind": "model", "config": model.config.to_dict(), "moe_layers": moe}
    return header, tensors


def save_model(path, model: ToyTransformer, extra: dict | None = None) -> None:
    header, tensors = model_tensors(model)
    if extra:
        header.update(extra)
    write_container(path, header, tensors)


def load_model(path) -> ToyTransformer:
    header, t = read_container(path)
    if header.get("kind") != "model":
        raise CorruptFileError(f"{path}: expected a model checkpoint, got {header.get('kind')!r}")
    try:
        cfg = ToyTransformerConfig(**header["config"])
        moe = header.get("moe_layers", {})
        layers = []
        for i in range(cfg.n_layers):
            if str(i) in moe:
                ffn = _block_from(moe[str(i)], t, f"layers.{i}.moe.")
            else:
                ffn = DenseFfn(Tensor2(t[f"layers.{i}.ffn.w_up"]), Tensor2(t[f"layers.{i}.ffn.w_gate"]),
                               Tensor2(t[f"layers.{i}.ffn.w_down"]))
            layers.append(DecoderLayer(*(t[f"layers.{i}.{n}"] for n in _ATTN[:5]), t[f"layers.{i}.ffn_norm"], ffn))
        model = ToyTransformer(cfg, t["embed"], layers, t["final_norm"], t["lm_head"])
    except KeyError as exc:
        raise CorruptFileError(f"{path}: missing tensor or field {exc}") from exc
    model.source = header.get("dense_source")
    return model


def save_block(path, block: MoeBlock, layer: int, **info) -> None:
    header = {"kind": "moe_block", "layer": layer, "d_h": block.d_h, **_block_meta(block), **info}
    write_container(path, header, _block_tensors(block, ""))


def load_block(path) -> tuple[MoeBlock, dict]:
    header, tensors = read_container(path)
    if header.get("kind") != "moe_block":
        raise CorruptFileError(f"{path}: expected an MoE block, got {header.get('kind')!r}")
    return _block_from(header, tensors, ""), header


def block_path(blocks_dir, layer: int) -> Path:
    return Path(blocks_dir) / f"layer_{layer:03d}.ldmo"
