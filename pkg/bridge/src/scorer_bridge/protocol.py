"""Wire protocol: newline-delimited JSON messages over a byte stream.

Message shapes (server side):

* ``{"op": "hello"}`` -> ``{"name": str, "dim": int, "version": 1}``
* ``{"op": "embed_image", "h": H, "w": W, "c": C, "dtype": "f32le",
  "data": base64(row-major HWC little-endian float32)}`` ->
  ``{"embedding": [float, ...]}``
* ``{"op": "embed_texts", "texts": [...]}`` -> ``{"embeddings": [[...], ...]}``
* failures -> ``{"op": "error", "message": str}``; the connection survives.

Floats are serialized as plain JSON numbers via ``repr`` (17 significant
digits), comfortably past the 9-digit floor the protocol promises.
"""

from __future__ import annotations

import base64
import json
from typing import BinaryIO

import numpy as np

PROTOCOL_VERSION = 1


class ProtocolError(ValueError):
    pass


def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def decode_message(line: bytes) -> dict:
    msg = json.loads(line.decode("utf-8"))
    if not isinstance(msg, dict):
        raise ProtocolError("messages must be JSON objects")
    return msg


def decode_image(msg: dict) -> np.ndarray:
    if msg.get("dtype") != "f32le":
        raise ProtocolError(f"unsupported dtype {msg.get('dtype')!r}")
    h, w, c = int(msg["h"]), int(msg["w"]), int(msg["c"])
    if c not in (1, 3):
        raise ProtocolError(f"channel count must be 1 or 3, got {c}")
    raw = base64.b64decode(msg["data"])
    expected = h * w * c * 4
    if len(raw) != expected:
        raise ProtocolError(f"payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).copy()


def serve(backend, rfile: BinaryIO, wfile: BinaryIO) -> None:
    """Answer requests until EOF; per-request failures keep the connection."""
    for line in rfile:
        if not line.strip():
            continue
        try:
            msg = decode_message(line)
            op = msg.get("op")
            if op == "hello":
                reply = {
                    "name": backend.name,
                    "dim": int(backend.dim),
                    "version": PROTOCOL_VERSION,
                }
                meta = getattr(backend, "preprocessing", None)
                if meta:
                    reply["preprocessing"] = meta
            elif op == "embed_image":
                z = backend.embed_image(decode_image(msg))
                reply = {"embedding": [float(v) for v in z]}
            elif op == "embed_texts":
                embeds = backend.embed_texts([str(t) for t in msg["texts"]])
                reply = {"embeddings": [[float(v) for v in e] for e in embeds]}
            else:
                reply = {"op": "error", "message": f"unknown op {op!r}"}
        except Exception as exc:
            reply = {"op": "error", "message": str(exc)}
        wfile.write(encode_message(reply))
        wfile.flush()
