"""Deterministic artifact serialization.

Model weights go into a single raw .bin file (tensors concatenated in sorted
name order, native little-endian) next to a JSON manifest holding shapes,
dtypes, offsets, config, and the vocabulary hash. The only timestamp lives
in the manifest's created_at field, so artifact bytes are reproducible and
manifests compare equal once created_at is dropped.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .errors import ValidationError
from .finetune import Classifier, ClassifierHead, HeadParams
from .lm import LMConfig, LMParams, LSTMLayerParams
from .tokenizer import Vocabulary

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat()


def _pack_tensors(tensors: dict[str, torch.Tensor]) -> tuple[bytes, dict]:
    blob = bytearray()
    index: dict[str, dict] = {}
    for name in sorted(tensors):
        t = tensors[name].detach()
        if t.dtype not in _DTYPES:
            raise ValidationError(f"unsupported tensor dtype {t.dtype} for {name!r}")
        raw = np.ascontiguousarray(t.numpy()).astype(_DTYPES[t.dtype]).tobytes()
        index[name] = {
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": len(blob),
            "nbytes": len(raw),
        }
        blob += raw
    return bytes(blob), index


def _unpack_tensors(blob: bytes, index: dict) -> dict[str, torch.Tensor]:
    out = {}
    for name, meta in index.items():
        raw = blob[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        out[name] = torch.from_numpy(arr).to(_TORCH_DTYPES[meta["dtype"]])
    return out


def _write_manifest(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["created_at"] = utc_now_iso()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True, indent=1)
        f.write("\n")


def _read_manifest(path: Path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_lm(params: LMParams, prefix) -> Path:
    """Write {prefix}.bin, {prefix}.json, and {prefix}.vocab.json."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    blob, index = _pack_tensors(params.named_tensors())
    bin_path = prefix.with_suffix(".bin")
    bin_path.write_bytes(blob)
    vocab_hash = None
    if params.vocab is not None:
        params.vocab.save(prefix.with_suffix(".vocab.json"))
        vocab_hash = params.vocab.content_hash()
    _write_manifest(
        prefix.with_suffix(".json"),
        {
            "kind": "lm_params",
            "config": params.config.to_dict(),
            "tensors": index,
            "bin_sha256": sha256_file(bin_path),
            "vocab_hash": vocab_hash,
        },
    )
    return prefix


def _params_from_tensors(
    config: LMConfig, tensors: dict[str, torch.Tensor], vocab: Vocabulary | None
) -> LMParams:
    layers = [
        LSTMLayerParams(
            w_ih=tensors[f"layer{i}.w_ih"],
            w_hh=tensors[f"layer{i}.w_hh"],
            bias=tensors[f"layer{i}.bias"],
        )
        for i in range(config.n_layers)
    ]
    return LMParams(
        config=config,
        embedding=tensors["embedding"],
        layers=layers,
        out_weight=tensors.get("out_weight"),
        out_bias=tensors["out_bias"],
        vocab=vocab,
    )


def load_lm(prefix) -> LMParams:
    prefix = Path(prefix)
    manifest = _read_manifest(prefix.with_suffix(".json"))
    if manifest.get("kind") != "lm_params":
        raise ValidationError(f"{prefix}: not an LM artifact")
    config = LMConfig.from_dict(manifest["config"])
    blob = prefix.with_suffix(".bin").read_bytes()
    tensors = _unpack_tensors(blob, manifest["tensors"])
    vocab_path = prefix.with_suffix(".vocab.json")
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    return _params_from_tensors(config, tensors, vocab)


def save_classifier(clf: Classifier, prefix) -> Path:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"encoder.{k}": v for k, v in clf.encoder.named_tensors().items()}
    tensors.update({f"head.{k}": v for k, v in clf.head.named_tensors().items()})
    blob, index = _pack_tensors(tensors)
    bin_path = prefix.with_suffix(".bin")
    bin_path.write_bytes(blob)
    vocab_hash = None
    if clf.encoder.vocab is not None:
        clf.encoder.vocab.save(prefix.with_suffix(".vocab.json"))
        vocab_hash = clf.encoder.vocab.content_hash()
    _write_manifest(
        prefix.with_suffix(".json"),
        {
            "kind": "classifier",
            "config": clf.encoder.config.to_dict(),
            "head": dataclasses.asdict(clf.head_config),
            "task": clf.task,
            "text_mode": clf.text_mode,
            "tensors": index,
            "bin_sha256": sha256_file(bin_path),
            "vocab_hash": vocab_hash,
        },
    )
    return prefix


def load_classifier(prefix) -> Classifier:
    prefix = Path(prefix)
    manifest = _read_manifest(prefix.with_suffix(".json"))
    if manifest.get("kind") != "classifier":
        raise ValidationError(f"{prefix}: not a classifier artifact")
    config = LMConfig.from_dict(manifest["config"])
    blob = prefix.with_suffix(".bin").read_bytes()
    tensors = _unpack_tensors(blob, manifest["tensors"])
    vocab_path = prefix.with_suffix(".vocab.json")
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    encoder = _params_from_tensors(
        config,
        {k.removeprefix("encoder."): v for k, v in tensors.items() if k.startswith("encoder.")},
        vocab,
    )
    head = HeadParams(
        **{k.removeprefix("head."): v for k, v in tensors.items() if k.startswith("head.")}
    )
    return Classifier(
        encoder=encoder,
        head=head,
        head_config=ClassifierHead(**manifest["head"]),
        task=manifest["task"],
        text_mode=manifest["text_mode"],
    )
