"""Feature datasets: JSON-lines records, manifests, validation and a
planted-structure generator.

Records hold pooled vectors (one per slot), a class index and optionally a
ranking of the fine-grained slots. The text slot always holds rank 1, so it
is not stored and gets prepended on load.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .ranking import RankingTarget
from .srr import DEFAULT_FINE_SLOTS, TEXT_SLOT

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")

# split sizes and class counts of the two public benchmarks; d is the text encoder width
BENCHMARK_SHAPES = {
    "mintrec2": {"splits": {"train": 6165, "dev": 1106, "test": 2033}, "K": 30, "d": 1024},
    "iemocap-da": {"splits": {"train": 6590, "dev": 942, "test": 1884}, "K": 12, "d": 1024},
}

# Rank@1 counts of (A, E, I) on MIntRec2.0, used as a realistic planted-ranking mix
MINTREC2_RANK1 = {"A": 1476, "E": 523, "I": 4166}


class DatasetError(ValueError):
    pass


@dataclass
class FeatureRecord:
    sample_id: str
    F_T: np.ndarray
    fine: dict[str, np.ndarray]
    label: int
    ranking: tuple[str, ...] | None = None

    @property
    def target(self) -> RankingTarget | None:
        return None if self.ranking is None else RankingTarget.with_text_first(self.ranking)

    def to_json(self) -> dict:
        out = {
            "sample_id": self.sample_id,
            "label": int(self.label),
            "features": {TEXT_SLOT: self.F_T.tolist(), **{k: v.tolist() for k, v in self.fine.items()}},
        }
        if self.ranking is not None:
            out["ranking"] = list(self.ranking)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureRecord":
        feats = dict(obj["features"])
        F_T = np.asarray(feats.pop(TEXT_SLOT), dtype=np.float64)
        fine = {k: np.asarray(v, dtype=np.float64) for k, v in feats.items()}
        ranking = obj.get("ranking")
        if ranking is not None:
            ranking = tuple(ranking)
            if ranking and ranking[0] == TEXT_SLOT:
                ranking = ranking[1:]
        return cls(str(obj["sample_id"]), F_T, fine, int(obj["label"]), ranking)


@dataclass
class DatasetManifest:
    name: str
    d: int
    K: int
    slots: tuple[str, ...]
    labels: list[str]
    splits: dict[str, int]
    files: dict[str, str]
    sha256: dict[str, str] = field(default_factory=dict)

    @property
    def fine_slots(self) -> tuple[str, ...]:
        return tuple(s for s in self.slots if s != TEXT_SLOT)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "d": self.d,
            "K": self.K,
            "slots": list(self.slots),
            "labels": list(self.labels),
            "splits": dict(self.splits),
            "files": dict(self.files),
            "sha256": dict(self.sha256),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DatasetManifest":
        try:
            m = cls(
                name=obj["name"],
                d=int(obj["d"]),
                K=int(obj["K"]),
                slots=tuple(obj["slots"]),
                labels=list(obj["labels"]),
                splits={k: int(v) for k, v in obj["splits"].items()},
                files=dict(obj["files"]),
                sha256=dict(obj.get("sha256", {})),
            )
        except KeyError as exc:
            raise DatasetError(f"manifest is missing field {exc}") from None
        if any(n <= 0 for n in m.splits.values()):
            raise DatasetError(f"split sizes must be positive: {m.splits}")
        if TEXT_SLOT not in m.slots:
            raise DatasetError(f"slot set {m.slots} lacks the text slot {TEXT_SLOT}")
        if len(m.labels) != m.K:
            raise DatasetError(f"{len(m.labels)} label names for K={m.K}")
        return m


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def validate_record(rec: FeatureRecord, d: int, K: int, fine_slots: Sequence[str]) -> None:
    sid = rec.sample_id
    if rec.F_T.shape != (d,):
        raise DatasetError(f"sample {sid}: text feature has dim {rec.F_T.shape}, dataset d={d}")
    if set(rec.fine) != set(fine_slots):
        raise DatasetError(f"sample {sid}: slots {sorted(rec.fine)} differ from {sorted(fine_slots)}")
    for slot, v in rec.fine.items():
        if v.shape != (d,):
            raise DatasetError(f"sample {sid}: slot {slot} has dim {v.shape}, dataset d={d}")
        if not np.all(np.isfinite(v)):
            raise DatasetError(f"sample {sid}: slot {slot} has non-finite values")
    if not np.all(np.isfinite(rec.F_T)):
        raise DatasetError(f"sample {sid}: text feature has non-finite values")
    if not 0 <= rec.label < K:
        raise DatasetError(f"sample {sid}: label {rec.label} outside [0, {K})")
    if rec.ranking is not None and sorted(rec.ranking) != sorted(fine_slots):
        raise DatasetError(f"sample {sid}: ranking {rec.ranking} is not a permutation of {tuple(fine_slots)}")


def write_records(records: Iterable[FeatureRecord], path) -> str:
    """Write JSON-lines and return the file's sha256."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")
    return sha256_file(path)


def read_records(path) -> list[FeatureRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(FeatureRecord.from_json(json.loads(line)))
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed record ({exc})") from None
    return out


def write_dataset(
    splits: Mapping[str, Sequence[FeatureRecord]],
    out_dir,
    name: str,
    K: int,
    labels: Sequence[str] | None = None,
    slots: Sequence[str] | None = None,
) -> Path:
    """Write one JSON-lines file per split plus ``manifest.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    first = next(iter(next(iter(splits.values()))))
    slots = tuple(slots) if slots else (TEXT_SLOT, *first.fine)
    files, digests = {}, {}
    for split, records in splits.items():
        fname = f"{split}.jsonl"
        digests[split] = write_records(records, out_dir / fname)
        files[split] = fname
    manifest = DatasetManifest(
        name=name,
        d=int(first.F_T.shape[0]),
        K=K,
        slots=slots,
        labels=list(labels) if labels else [f"class_{k}" for k in range(K)],
        splits={s: len(r) for s, r in splits.items()},
        files=files,
        sha256=digests,
    )
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    with open(path, encoding="utf-8") as fh:
        return DatasetManifest.from_json(json.load(fh))


def load(manifest_path) -> dict[str, list[FeatureRecord]]:
    """Load and validate every split named in the manifest."""
    manifest_path = Path(manifest_path)
    m = load_manifest(manifest_path)
    out = {}
    for split, fname in m.files.items():
        path = manifest_path.parent / fname
        if not path.exists():
            raise DatasetError(f"data file {path} for split {split} does not exist")
        want = m.sha256.get(split)
        if want is not None and sha256_file(path) != want:
            raise DatasetError(f"digest mismatch for {path}")
        records = read_records(path)
        for rec in records:
            validate_record(rec, m.d, m.K, m.fine_slots)
        if split in m.splits and len(records) != m.splits[split]:
            raise DatasetError(f"split {split}: manifest says {m.splits[split]} records, file has {len(records)}")
        out[split] = records
    return out


def to_arrays(records: Sequence[FeatureRecord], fine_slots: Sequence[str] | None = None):
    """``(X, y, relevance)``; X is (n, 1 + n_fine, d), relevance None unless every record is ranked."""
    if not records:
        raise DatasetError("no records")
    fine_slots = tuple(fine_slots or records[0].fine)
    slots = (TEXT_SLOT, *fine_slots)
    X = np.stack([np.stack([r.F_T, *(r.fine[s] for s in fine_slots)]) for r in records])
    y = np.array([r.label for r in records], dtype=np.int64)
    rel = None
    if all(r.ranking is not None for r in records):
        rel = np.stack([r.target.relevance_for(slots) for r in records])
    return X, y, rel


def rank_stats(records: Sequence, slots: Sequence[str] | None = None) -> dict[str, list[int]]:
    """Counts of each fine slot at Rank@1..n over the stored rankings.

    ``records`` may be :class:`FeatureRecord` objects or anything with
    ``sample_id`` and ``ranking``/``order`` attributes.
    """
    rankings, missing = [], []
    for r in records:
        order = getattr(r, "ranking", None)
        if order is None:
            order = getattr(r, "order", None)
        if order is None:
            missing.append(str(getattr(r, "sample_id", "?")))
            continue
        rankings.append(tuple(s for s in order if s != TEXT_SLOT))
    if missing:
        raise DatasetError(f"records without rankings: {', '.join(missing)}")
    if slots is None:
        slots = sorted({s for order in rankings for s in order})
    n = len(slots)
    table = {s: [0] * n for s in slots}
    for order in rankings:
        for pos, s in enumerate(order):
            if s not in table:
                raise DatasetError(f"ranking mentions unknown slot {s!r}")
            table[s][pos] += 1
    return table


def format_rank_table(table: Mapping[str, Sequence[int]]) -> str:
    n = len(next(iter(table.values()), []))
    header = ["slot"] + [f"Rank@{i + 1}" for i in range(n)]
    rows = [[s, *map(str, counts)] for s, counts in table.items()]
    widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
    return "\n".join([fmt(header), *map(fmt, rows)]) + "\n"


# planted-structure generator


@dataclass
class SynthSpec:
    """Desk-scale stand-in for encoder features.

    Per class ``k`` a mean ``mu_k`` of norm ``separation`` is drawn so that
    all pairwise distances are at least ``separation``. The text feature is
    ``mu_label + noise``. One fine slot, drawn from ``rank1_weights``,
    carries ``fine_signal * mu_label + noise``; the others are pure noise.
    That slot ranks first, the rest follow by their dot product with
    ``mu_label``.

    ``style_offset`` adds one shared random vector of that norm to every
    fine slot, mimicking the common phrasing all description embeddings
    share. It makes fine slots look alike to the classifier so that the
    ordering of the noise slots is only learnable from the ranking
    targets. ``style_offset=0`` gives pure-noise slots.
    """

    seed: int = 0
    n: dict[str, int] = field(default_factory=lambda: {"train": 2000, "dev": 500, "test": 500})
    d: int = 16
    K: int = 4
    separation: float = 4.0
    noise: float = 0.5
    fine_slots: tuple[str, ...] = DEFAULT_FINE_SLOTS
    rank1_weights: dict[str, float] | None = None
    fine_signal: float = 1.0
    style_offset: float = 2.0

    def __post_init__(self):
        self.fine_slots = tuple(self.fine_slots)
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.d < 1 or self.K < 1:
            raise ValueError("d and K must be positive")
        if any(v <= 0 for v in self.n.values()):
            raise ValueError(f"split sizes must be positive: {self.n}")

    @property
    def rank1_probs(self) -> np.ndarray:
        w = self.rank1_weights or {s: 1.0 for s in self.fine_slots}
        p = np.array([float(w.get(s, 0.0)) for s in self.fine_slots])
        if p.sum() <= 0 or np.any(p < 0):
            raise ValueError(f"invalid planted-ranking weights {w}")
        return p / p.sum()

    @classmethod
    def from_json(cls, obj: Mapping) -> "SynthSpec":
        obj = dict(obj)
        if "fine_slots" in obj:
            obj["fine_slots"] = tuple(obj["fine_slots"])
        return cls(**obj)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "n": dict(self.n),
            "d": self.d,
            "K": self.K,
            "separation": self.separation,
            "noise": self.noise,
            "fine_slots": list(self.fine_slots),
            "rank1_weights": self.rank1_weights,
            "fine_signal": self.fine_signal,
            "style_offset": self.style_offset,
        }


def class_means(rng: np.random.Generator, K: int, d: int, separation: float, max_tries: int = 2000) -> np.ndarray:
    for _ in range(max_tries):
        dirs = rng.normal(size=(K, d))
        norms = np.linalg.norm(dirs, axis=1, keepdims=True)
        if np.any(norms == 0):
            continue
        mu = separation * dirs / norms
        if K == 1:
            return mu
        dist = np.linalg.norm(mu[:, None] - mu[None], axis=-1)
        if dist[np.triu_indices(K, 1)].min() >= separation:
            return mu
    # rejection failed: spread points on the sphere by pairwise repulsion
    u = rng.normal(size=(K, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    for _ in range(max_tries):
        diff = u[:, None] - u[None]
        dist2 = (diff**2).sum(-1) + np.eye(K)
        if np.sqrt(dist2[np.triu_indices(K, 1)]).min() >= 1.0:
            return separation * u
        with np.errstate(divide="ignore", invalid="ignore"):
            u = u + 0.05 * (diff / dist2[..., None] ** 2).sum(1)
            u /= np.linalg.norm(u, axis=1, keepdims=True)
        if not np.isfinite(u).all():
            break
    raise ValueError(
        f"could not place {K} class means at pairwise distance >= {separation} in d={d}; use a larger d"
    )


def synthesize(spec: SynthSpec) -> dict[str, list[FeatureRecord]]:
    """Generate train/dev/test splits; a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    mu = class_means(rng, spec.K, spec.d, spec.separation)
    style = rng.normal(size=spec.d)
    style *= spec.style_offset / np.linalg.norm(style)
    probs = spec.rank1_probs
    n_fine = len(spec.fine_slots)
    out = {}
    for split in sorted(spec.n, key=lambda s: SPLITS.index(s) if s in SPLITS else len(SPLITS)):
        n = spec.n[split]
        labels = rng.integers(0, spec.K, size=n)
        top = rng.choice(n_fine, size=n, p=probs)
        noise = rng.normal(scale=spec.noise, size=(n, 1 + n_fine, spec.d))
        records = []
        for i in range(n):
            m = mu[labels[i]]
            F_T = m + noise[i, 0]
            fine = {}
            for j, slot in enumerate(spec.fine_slots):
                signal = spec.fine_signal * m if j == top[i] else 0.0
                fine[slot] = signal + style + noise[i, 1 + j]
            rest = [s for j, s in enumerate(spec.fine_slots) if j != top[i]]
            rest.sort(key=lambda s: -float(fine[s] @ m))
            ranking = (spec.fine_slots[top[i]], *rest)
            records.append(FeatureRecord(f"{split}-{i:06d}", F_T, fine, int(labels[i]), ranking))
        out[split] = records
    return out


def dataset_digest(splits: Mapping[str, Sequence[FeatureRecord]]) -> str:
    h = hashlib.sha256()
    for split in sorted(splits):
        for rec in splits[split]:
            h.update(json.dumps(rec.to_json(), separators=(",", ":")).encode())
    return h.hexdigest()


def label_counts(records: Sequence[FeatureRecord]) -> Counter:
    return Counter(r.label for r in records)
