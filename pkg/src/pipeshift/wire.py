"""Scorer wire protocol: newline-delimited JSON over a byte stream.

Requests and responses, one JSON object per line:

* ``{"op": "hello"}`` -> ``{"name": str, "dim": int, "version": 1}``
* ``{"op": "embed_image", "h": H, "w": W, "c": C, "dtype": "f32le",
  "data": base64(row-major HWC little-endian float32)}`` ->
  ``{"embedding": [float, ...]}`` (unit-normalized by the server)
* ``{"op": "embed_texts", "texts": [str, ...]}`` ->
  ``{"embeddings": [[float, ...], ...]}``
* any failure -> ``{"op": "error", "message": str}``; the connection stays
  usable.

Floats ride as plain JSON numbers (``repr`` round-trip, 17 significant
digits). The client side here drives campaigns against external scorer
processes over stdio or TCP; ``serve_stream`` is the matching server loop
used by in-process tests.
"""

from __future__ import annotations

import base64
import json
import socket
import subprocess
from typing import BinaryIO

import numpy as np

from .errors import ContractError, ScorerError
from .scoring import ClassPrototypes, build_prototypes, gen_phantoms
from .seeding import derive_seed

PROTOCOL_VERSION = 1


def encode_message(msg: dict) -> bytes:
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def decode_message(line: bytes) -> dict:
    msg = json.loads(line.decode("utf-8"))
    if not isinstance(msg, dict):
        raise ContractError("protocol messages must be JSON objects")
    return msg


def image_payload(img: np.ndarray) -> dict:
    arr = np.ascontiguousarray(np.asarray(img, dtype="<f4"))
    if arr.ndim != 3:
        raise ContractError("embed_image payload must be (H, W, C)")
    return {
        "op": "embed_image",
        "h": int(arr.shape[0]),
        "w": int(arr.shape[1]),
        "c": int(arr.shape[2]),
        "dtype": "f32le",
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_image_payload(msg: dict) -> np.ndarray:
    if msg.get("dtype") != "f32le":
        raise ContractError(f"unsupported dtype {msg.get('dtype')!r}")
    h, w, c = int(msg["h"]), int(msg["w"]), int(msg["c"])
    raw = base64.b64decode(msg["data"])
    expected = h * w * c * 4
    if len(raw) != expected:
        raise ContractError(f"payload size {len(raw)} != expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, c).copy()


def serve_stream(scorer, rfile: BinaryIO, wfile: BinaryIO) -> None:
    """Answer protocol requests from a stream until EOF.

    Any per-request failure is reported as an error message and the loop
    continues, so one malformed request never kills the connection.
    """
    for line in rfile:
        if not line.strip():
            continue
        try:
            msg = decode_message(line)
            op = msg.get("op")
            if op == "hello":
                reply = {"name": scorer.name, "dim": int(scorer.dim), "version": PROTOCOL_VERSION}
            elif op == "embed_image":
                z = scorer.embed_image(decode_image_payload(msg))
                reply = {"embedding": [float(v) for v in z]}
            elif op == "embed_texts":
                embeds = scorer.embed_texts(list(msg["texts"]))
                reply = {"embeddings": [[float(v) for v in e] for e in embeds]}
            else:
                reply = {"op": "error", "message": f"unknown op {op!r}"}
        except Exception as exc:
            reply = {"op": "error", "message": str(exc)}
        wfile.write(encode_message(reply))
        wfile.flush()


class _StdioTransport:
    def __init__(self, command: list[str]):
        self.command = list(command)
        self.proc: subprocess.Popen | None = None

    def open(self):
        self.proc = subprocess.Popen(
            self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE
        )

    def close(self):
        if self.proc is not None:
            try:
                self.proc.stdin.close()
            except Exception:
                pass
            self.proc.terminate()
            self.proc.wait(timeout=10)
            self.proc = None

    def request(self, msg: dict) -> dict:
        if self.proc is None or self.proc.poll() is not None:
            raise ConnectionError("scorer process not running")
        self.proc.stdin.write(encode_message(msg))
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise ConnectionError("scorer process closed the pipe")
        return decode_message(line)


class _TcpTransport:
    def __init__(self, host: str, port: int):
        self.host, self.port = host, int(port)
        self.sock: socket.socket | None = None
        self._rfile = None

    def open(self):
        self.sock = socket.create_connection((self.host, self.port), timeout=30)
        self._rfile = self.sock.makefile("rb")

    def close(self):
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None
                self._rfile = None

    def request(self, msg: dict) -> dict:
        if self.sock is None:
            raise ConnectionError("not connected")
        self.sock.sendall(encode_message(msg))
        line = self._rfile.readline()
        if not line:
            raise ConnectionError("scorer connection closed")
        return decode_message(line)


class ExternalScorer:
    """Wire-protocol client presenting the in-process scorer surface.

    One request in flight per connection; a broken connection is re-opened
    and the request retried up to three times before a ScorerError
    propagates to the campaign runner.
    """

    MAX_RETRIES = 3

    def __init__(self, transport, prototype_seed: int | None = None,
                 prototype_texts: tuple[list[str], list[str]] | None = None,
                 modality_tag: str = "mri-like"):
        self._transport = transport
        self._prototype_seed = prototype_seed
        self._prototype_texts = prototype_texts
        self._modality_tag = modality_tag
        self._protos: ClassPrototypes | None = None
        self._transport.open()
        hello = self._request({"op": "hello"})
        self.name = str(hello["name"])
        self.dim = int(hello["dim"])

    @classmethod
    def over_stdio(cls, command: list[str], **kwargs) -> "ExternalScorer":
        return cls(_StdioTransport(command), **kwargs)

    @classmethod
    def over_tcp(cls, host: str, port: int, **kwargs) -> "ExternalScorer":
        return cls(_TcpTransport(host, port), **kwargs)

    def close(self):
        self._transport.close()

    def _request(self, msg: dict) -> dict:
        last: Exception | None = None
        for attempt in range(self.MAX_RETRIES):
            try:
                if attempt > 0:
                    self._transport.close()
                    self._transport.open()
                reply = self._transport.request(msg)
                if reply.get("op") == "error":
                    # Protocol-level error: the connection is fine, the
                    # request is not. Do not retry.
                    raise ScorerError(f"scorer error: {reply.get('message')}")
                return reply
            except ScorerError:
                raise
            except Exception as exc:
                last = exc
        raise ScorerError(f"scorer unreachable after {self.MAX_RETRIES} attempts: {last}")

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        reply = self._request(image_payload(img))
        z = np.asarray(reply["embedding"], dtype=np.float64)
        if z.shape != (self.dim,):
            raise ScorerError(f"embedding dim {z.shape} != declared {self.dim}")
        return z

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        reply = self._request({"op": "embed_texts", "texts": texts})
        return [np.asarray(e, dtype=np.float64) for e in reply["embeddings"]]

    def prototypes(self) -> ClassPrototypes:
        if self._protos is not None:
            return self._protos
        if self._prototype_texts is not None:
            neg, pos = self._prototype_texts
            self._protos = build_prototypes(self.embed_texts(neg), self.embed_texts(pos))
        elif self._prototype_seed is not None:
            bank = gen_phantoms(
                32, derive_seed(self._prototype_seed, "prototype-bank"), self._modality_tag
            )
            self._protos = build_prototypes(
                [self.embed_image(s.image) for s in bank if s.label == 0],
                [self.embed_image(s.image) for s in bank if s.label == 1],
            )
        else:
            raise ContractError("external scorer needs a prototype seed or prompt texts")
        return self._protos
