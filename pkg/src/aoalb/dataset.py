"""Labelled AoA feature samples and their CSV representation."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptInput, IoError

FEATURE_DIM = 200
META_COLUMNS = ("region", "track_id", "window_index", "estimator", "valid")


@dataclass
class AoaSample:
    features: np.ndarray
    region: str
    track_id: str
    window_index: int
    estimator: str
    valid: bool = True
    provenance: str = "real"


def natural_key(label: str):
    return (0, int(label), label) if label.isdigit() else (1, 0, label)


def sort_labels(labels: Iterable[str]) -> list[str]:
    return sorted(set(labels), key=natural_key)


@dataclass
class Dataset:
    """Column-oriented view of many :class:`AoaSample` rows."""

    features: np.ndarray
    region: np.ndarray
    track_id: np.ndarray
    window_index: np.ndarray
    estimator: np.ndarray
    valid: np.ndarray
    provenance: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.features)
        feats = np.asarray(self.features, dtype=float)
        self.features = feats.reshape(n, -1) if n else feats.reshape(0, feats.shape[-1] if feats.ndim > 1 else 0)
        self.region = np.asarray(self.region, dtype=object)
        self.track_id = np.asarray(self.track_id, dtype=object)
        self.window_index = np.asarray(self.window_index, dtype=np.int64)
        self.estimator = np.asarray(self.estimator, dtype=object)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.provenance is None:
            self.provenance = np.full(n, "real", dtype=object)
        self.provenance = np.asarray(self.provenance, dtype=object)
        for col in (self.region, self.track_id, self.window_index, self.estimator, self.valid, self.provenance):
            if len(col) != n:
                raise CorruptInput("dataset columns have different lengths")

    @classmethod
    def from_samples(cls, samples: Sequence[AoaSample], dim: int = FEATURE_DIM) -> "Dataset":
        if not samples:
            return cls.empty(dim)
        return cls(
            np.stack([s.features for s in samples]),
            [s.region for s in samples],
            [s.track_id for s in samples],
            [s.window_index for s in samples],
            [s.estimator for s in samples],
            [s.valid for s in samples],
            [s.provenance for s in samples],
        )

    @classmethod
    def empty(cls, dim: int = FEATURE_DIM) -> "Dataset":
        return cls(np.zeros((0, dim)), [], [], [], [], [], [])

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.region for p in parts]),
            np.concatenate([p.track_id for p in parts]),
            np.concatenate([p.window_index for p in parts]),
            np.concatenate([p.estimator for p in parts]),
            np.concatenate([p.valid for p in parts]),
            np.concatenate([p.provenance for p in parts]),
        )

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.features[index],
            self.region[index],
            self.track_id[index],
            self.window_index[index],
            self.estimator[index],
            self.valid[index],
            self.provenance[index],
        )

    def only_valid(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.valid))

    def in_region(self, region: str) -> "Dataset":
        return self.subset(np.flatnonzero(self.region == region))

    def samples(self) -> list[AoaSample]:
        return [
            AoaSample(self.features[i].copy(), self.region[i], self.track_id[i],
                      int(self.window_index[i]), self.estimator[i], bool(self.valid[i]),
                      self.provenance[i])
            for i in range(len(self))
        ]

    def labels(self, kind: str = "track") -> np.ndarray:
        return self.track_id if kind == "track" else self.region

    def fingerprint(self) -> str:
        """Content hash over features and labels."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        for col in (self.region, self.track_id, self.estimator, self.provenance):
            h.update("\x1f".join(map(str, col)).encode("utf-8"))
        h.update(np.ascontiguousarray(self.window_index, dtype="<i8").tobytes())
        h.update(self.valid.astype(np.uint8).tobytes())
        return h.hexdigest()

    def to_csv(self, path, provenance: bool | None = None) -> None:
        """Write the feature CSV; ``provenance`` adds the synthetic/real column."""
        if provenance is None:
            provenance = bool(np.any(self.provenance != "real"))
        header = [f"f{i:03d}" for i in range(self.dim)] + list(META_COLUMNS)
        if provenance:
            header.append("provenance")
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                for i in range(len(self)):
                    row = [f"{v:.6f}" for v in self.features[i]]
                    row += [self.region[i], self.track_id[i], int(self.window_index[i]),
                            self.estimator[i], int(self.valid[i])]
                    if provenance:
                        row.append(self.provenance[i])
                    writer.writerow(row)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        try:
            with open(path, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        if not rows:
            raise CorruptInput(f"{path} is empty")
        header = rows[0]
        n_feat = sum(1 for h in header if h.startswith("f") and h[1:].isdigit())
        expected = [f"f{i:03d}" for i in range(n_feat)] + list(META_COLUMNS)
        has_prov = header[-1] == "provenance"
        if header[: len(expected)] != expected or len(header) != len(expected) + has_prov:
            raise CorruptInput(f"{path} does not have the feature CSV header")
        body = rows[1:]
        try:
            feats = np.array([[float(v) for v in r[:n_feat]] for r in body]).reshape(len(body), n_feat)
            return cls(
                feats,
                [r[n_feat] for r in body],
                [r[n_feat + 1] for r in body],
                [int(r[n_feat + 2]) for r in body],
                [r[n_feat + 3] for r in body],
                [r[n_feat + 4] in ("1", "true", "True") for r in body],
                [r[n_feat + 5] for r in body] if has_prov else None,
            )
        except (ValueError, IndexError) as exc:
            raise CorruptInput(f"{path}: malformed row ({exc})") from exc


def load_features(paths: Sequence[str | Path]) -> Dataset:
    return Dataset.concat([Dataset.from_csv(p) for p in paths])
