"""Self-describing, byte-deterministic container for trained models.

Layout: the magic line ``AOALB-MODEL-v1\\n``, a little-endian u64 header
length, a compact sorted-key JSON header, then the raw little-endian array
payload.  Models whose state is an object graph (the streaming learners)
store a pickle blob instead of named arrays.
"""
from __future__ import annotations

import json
import pickle
import struct
from pathlib import Path

import numpy as np

from .errors import ArtifactKindMismatch, CorruptInput, IoError

FORMAT = "AOALB-MODEL-v1"
MAGIC = (FORMAT + "\n").encode("ascii")
PICKLE_PROTOCOL = 4

# kind -> class with to_payload() / from_payload(meta, arrays, blob)
_REGISTRY: dict[str, type] = {}


def register(*kinds: str):
    def deco(cls):
        for kind in kinds:
            _REGISTRY[kind] = cls
        return cls

    return deco


def to_jsonable(value):
    """Convert numpy scalars/arrays nested in containers to plain Python."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


class ModelArtifact:
    """A trained model plus the metadata needed to reproduce and audit it."""

    def __init__(self, kind: str, model=None, *, config=None, seed=None, fingerprint: str = "",
                 meta=None, arrays=None, blob: bytes | None = None):
        self.kind = kind
        self.config = to_jsonable(dict(config or {}))
        self.seed = seed
        self.fingerprint = fingerprint
        self._model = model
        if model is not None:
            meta, arrays, blob = model.to_payload()
        self.meta = to_jsonable(meta or {})
        self.arrays = {k: np.asarray(v) for k, v in (arrays or {}).items()}
        self.blob = blob

    @property
    def model(self):
        if self._model is None:
            try:
                cls = _REGISTRY[self.kind]
            except KeyError:
                raise CorruptInput(f"no model class registered for kind {self.kind!r}") from None
            self._model = cls.from_payload(self.meta, self.arrays, self.blob)
        return self._model

    @property
    def classes(self) -> list[str]:
        return list(self.meta.get("classes", []))

    def predict_proba(self, features) -> np.ndarray:
        return self.model.predict_proba(np.atleast_2d(np.asarray(features, dtype=float)))

    def predict(self, features) -> np.ndarray:
        return self.model.predict(np.atleast_2d(np.asarray(features, dtype=float)))

    def to_bytes(self) -> bytes:
        table = []
        chunks = []
        offset = 0
        for name in sorted(self.arrays):
            arr = self.arrays[name]
            dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
            raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            table.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        pickled = None
        if self.blob is not None:
            pickled = {"offset": offset, "nbytes": len(self.blob)}
            chunks.append(self.blob)
        header = {
            "format": FORMAT,
            "kind": self.kind,
            "config": self.config,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "meta": self.meta,
            "arrays": table,
            "pickle": pickled,
        }
        head = dumps(header).encode("utf-8")
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, kind: str | None = None) -> "ModelArtifact":
        if not data.startswith(MAGIC):
            raise CorruptInput("not a model artifact (bad format tag)")
        pos = len(MAGIC)
        try:
            (size,) = struct.unpack_from("<Q", data, pos)
            header = json.loads(data[pos + 8 : pos + 8 + size].decode("utf-8"))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptInput(f"unreadable artifact header: {exc}") from exc
        if header.get("format") != FORMAT:
            raise CorruptInput("artifact format tag mismatch")
        if kind is not None and header["kind"] != kind:
            raise ArtifactKindMismatch(f"artifact holds a {header['kind']} model, expected {kind}")
        body = data[pos + 8 + size :]
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = entry["offset"] + count * dtype.itemsize
            if end > len(body):
                raise CorruptInput(f"artifact array {entry['name']} is truncated")
            arrays[entry["name"]] = np.frombuffer(body, dtype=dtype, count=count,
                                                  offset=entry["offset"]).reshape(entry["shape"]).copy()
        blob = None
        if header.get("pickle"):
            p = header["pickle"]
            blob = body[p["offset"] : p["offset"] + p["nbytes"]]
            if len(blob) != p["nbytes"]:
                raise CorruptInput("artifact pickle payload is truncated")
        return cls(header["kind"], config=header["config"], seed=header["seed"],
                   fingerprint=header["fingerprint"], meta=header["meta"], arrays=arrays, blob=blob)

    def save(self, path) -> None:
        try:
            Path(path).write_bytes(self.to_bytes())
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path, kind: str | None = None) -> "ModelArtifact":
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        return cls.from_bytes(data, kind)


def pickle_state(obj) -> bytes:
    return pickle.dumps(obj, protocol=PICKLE_PROTOCOL)


def unpickle_state(blob: bytes):
    try:
        return pickle.loads(blob)
    except Exception as exc:  # pickle raises many unrelated types on bad input
        raise CorruptInput(f"cannot restore pickled model: {exc}") from exc
