"""JSON checkpoints for model parameters.

Layout::

    {"format": "cosa-ckpt", "version": 1, "kind": ..., "meta": {...},
     "params": {name: {"shape": [...], "data": [floats]}}}

Python's float repr is shortest-round-trip, so arrays reload bit-exactly.
"""
import json
from pathlib import Path

import numpy as np

from .models import Classifier, Decoder, Encoder

CKPT_FORMAT = "cosa-ckpt"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_arrays(arrays):
    return {k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in sorted(arrays.items())}


def decode_arrays(doc):
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc.items()}


def dump_doc(kind, meta, arrays, extra=None):
    doc = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "kind": kind,
           "meta": meta, "params": encode_arrays(arrays)}
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True) + "\n"


def load_doc(path, kind=None):
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    if doc.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: not a {CKPT_FORMAT} file")
    if doc.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise CheckpointError(f"{path}: expected kind {kind!r}, found {doc.get('kind')!r}")
    return doc


def save_model(path, model):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_doc(model.kind, model.meta(), model.params), encoding="utf-8")


def load_model(path, kind=None):
    doc = load_doc(path, kind)
    params, meta = decode_arrays(doc["params"]), doc["meta"]
    try:
        if doc["kind"] == "encoder":
            return Encoder(params, meta["d"], meta["h"])
        if doc["kind"] == "decoder":
            return Decoder(params, meta["d"], meta["h"], meta["n"])
        if doc["kind"] == "classifier":
            return Classifier(params, meta["arch"], meta["h"], meta["Z"], meta["k"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: shape or metadata mismatch: {exc}") from None
    raise CheckpointError(f"{path}: unknown model kind {doc['kind']!r}")


def save_autoencoder(path, encoder, decoder):
    """Encoder and decoder in one file, parameters prefixed ``enc.`` / ``dec.``."""
    arrays = {f"enc.{k}": v for k, v in encoder.params.items()}
    arrays.update({f"dec.{k}": v for k, v in decoder.params.items()})
    meta = {"d": encoder.d, "h": encoder.h, "n": decoder.n, "dec_h": decoder.h}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dump_doc("autoencoder", meta, arrays), encoding="utf-8")


def load_autoencoder(path):
    doc = load_doc(path, "autoencoder")
    arrays, meta = decode_arrays(doc["params"]), doc["meta"]
    enc = {k[4:]: v for k, v in arrays.items() if k.startswith("enc.")}
    dec = {k[4:]: v for k, v in arrays.items() if k.startswith("dec.")}
    try:
        return Encoder(enc, meta["d"], meta["h"]), Decoder(dec, meta["d"], meta["dec_h"], meta["n"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: shape or metadata mismatch: {exc}") from None
