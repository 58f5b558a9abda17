"""Three-step extraction: aspect discovery, per-aspect description, label-conditioned ranking.

Every chat response is cached in ``<cache_dir>/<step>.jsonl`` keyed by
sample id, template hash, model name and a digest of the request, so a
re-run only contacts the endpoint for cache misses and an interrupted run
picks up where it stopped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import warnings
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..data import format_rank_table, rank_stats
from .client import ChatClient, ChatRequest, Client, MockClient
from .parse import initials, is_permutation, norm_key, parse_aspect_list, parse_descriptions, parse_ranking
from .templates import PromptTemplate, load_templates

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class RankParseError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: str
    text: str
    video: str = ""
    label: str | None = None
    split: str = "train"


@dataclass(frozen=True)
class SemanticAspect:
    name: str
    abbreviation: str
    frequency: int = 0


@dataclass
class DescriptionSet:
    sample_id: str
    descriptions: dict[str, str]
    flagged: bool = False

    @property
    def missing(self) -> list[str]:
        return [k for k, v in self.descriptions.items() if not v.strip()]


@dataclass
class RankRecord:
    sample_id: str
    order: tuple[str, ...]
    flag: str | None = None  # None, "requeried" or "fallback"


# caching


def request_digest(request: ChatRequest) -> str:
    blob = json.dumps(list(request.messages), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


class ResponseCache:
    """Append-only JSON-lines cache, one file per step.

    Each record is written with a single ``write`` call under a lock and
    flushed to disk. A torn final line (from a killed process) is dropped
    on load when ``repair`` is set and is an error otherwise.
    """

    def __init__(self, cache_dir, repair: bool = False):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.repair = repair
        self._lock = threading.Lock()
        self._mem: dict[str, dict[tuple, dict]] = {}

    def _path(self, step: str) -> Path:
        return self.dir / f"{step}.jsonl"

    def _load(self, step: str) -> dict[tuple, dict]:
        if step in self._mem:
            return self._mem[step]
        table = {}
        path = self._path(step)
        if path.exists():
            raw = path.read_bytes()
            lines = raw.split(b"\n")
            good_bytes = 0
            for i, line in enumerate(lines):
                if not line.strip():
                    good_bytes += len(line) + 1
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    if i == len(lines) - 1 and self.repair:
                        log.warning("dropping torn record at end of %s", path)
                        with path.open("r+b") as fh:
                            fh.truncate(good_bytes)
                        break
                    raise PipelineError(f"corrupt cache record in {path} line {i + 1}; rerun with --resume to repair") from None
                table[self.key(rec)] = rec
                good_bytes += len(line) + 1
        self._mem[step] = table
        return table

    @staticmethod
    def key(rec: Mapping) -> tuple:
        return (rec["sample_id"], rec["template_hash"], rec["model"], rec["request_digest"])

    def get(self, step: str, key: tuple) -> dict | None:
        with self._lock:
            return self._load(step).get(key)

    def put(self, step: str, rec: dict) -> None:
        line = json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n"
        with self._lock:
            table = self._load(step)
            with self._path(step).open("a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            table[self.key(rec)] = rec


class CachedCaller:
    """Routes requests through the cache and counts real client calls."""

    def __init__(self, client: Client, cache: ResponseCache | None):
        self.client = client
        self.cache = cache
        self.hits = 0
        self.misses = 0
        self._lock = threading.Lock()

    def __call__(self, request: ChatRequest, template: PromptTemplate, parse=None) -> str:
        key = (request.sample_id, template.digest, self.client.model, request_digest(request))
        if self.cache is not None:
            rec = self.cache.get(request.step, key)
            if rec is not None:
                with self._lock:
                    self.hits += 1
                return rec["response_text"]
        text = self.client.complete(request)
        with self._lock:
            self.misses += 1
        if self.cache is not None:
            self.cache.put(
                request.step,
                {
                    "sample_id": request.sample_id,
                    "template_hash": template.digest,
                    "model": self.client.model,
                    "request_digest": key[3],
                    "attempt": request.attempt,
                    "response_text": text,
                    "parsed": parse(text) if parse else None,
                },
            )
        return text


def _as_caller(client) -> CachedCaller:
    return client if isinstance(client, CachedCaller) else CachedCaller(client, None)


def _user(content) -> tuple:
    return ({"role": "user", "content": content},)


def _with_video(text: str, video: str):
    if not video:
        return text
    return [{"type": "text", "text": text}, {"type": "video_url", "video_url": {"url": video}}]


# step 1


def discover(
    samples: Sequence[Sample],
    client,
    template: PromptTemplate,
    task: str = "multimodal intent recognition",
    flagged: list | None = None,
) -> list[SemanticAspect]:
    """Query once per sample and merge the listed aspects across responses.

    Names are merged ignoring case and punctuation; frequency counts the
    responses that list an aspect. Samples whose response lists nothing are
    appended to ``flagged``.
    """
    if not samples:
        raise ValueError("discovery needs a nonempty sample subset")
    call = _as_caller(client)
    counts: Counter = Counter()
    forms: dict[str, Counter] = {}
    abbrs: dict[str, Counter] = {}
    for s in samples:
        prompt = template.render(task=task, text=s.text, video=s.video or "(none)")
        text = call(ChatRequest(_user(prompt), "discover", s.sample_id), template, parse_aspect_list)
        items = parse_aspect_list(text)
        if not items:
            log.warning("discovery response for %s lists no aspects", s.sample_id)
            if flagged is not None:
                flagged.append(s.sample_id)
        for name, abbr in items:
            key = norm_key(name)
            counts[key] += 1
            forms.setdefault(key, Counter())[name] += 1
            if abbr:
                abbrs.setdefault(key, Counter())[abbr] += 1
    ordered = sorted(counts, key=lambda k: (-counts[k], k))
    used, out = set(), []
    for key in ordered:
        name = min(forms[key].items(), key=lambda kv: (-kv[1], kv[0]))[0]
        abbr = min(abbrs[key].items(), key=lambda kv: (-kv[1], kv[0]))[0] if key in abbrs else initials(name)
        base, n = abbr, 2
        while abbr in used:
            abbr, n = f"{base}{n}", n + 1
        used.add(abbr)
        out.append(SemanticAspect(name, abbr, counts[key]))
    return out


def select_top_k(aspects: Sequence[SemanticAspect], K: int) -> list[SemanticAspect]:
    """The ``K`` most frequent aspects; ties go to the lexicographically smaller name."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if K > len(aspects):
        warnings.warn(f"asked for {K} aspects but only {len(aspects)} were discovered", stacklevel=2)
    return sorted(aspects, key=lambda a: (-a.frequency, a.name.lower(), a.name))[:K]


# step 2


def _aspect_map(S: Sequence[SemanticAspect]) -> dict[str, str]:
    return {a.abbreviation: a.name for a in S}


def describe_prompt(sample: Sample, S: Sequence[SemanticAspect], template: PromptTemplate, task: str, instructions=None) -> str:
    instructions = instructions or {}
    sections = "\n".join(
        f"({i}) {a.name}: {instructions.get(a.abbreviation, f'describe what the clip shows about {a.name.lower()}')}"
        for i, a in enumerate(S, 1)
    )
    return template.render(task=task, text=sample.text, sections=sections, first_heading=S[0].name)


def describe(
    sample: Sample,
    S: Sequence[SemanticAspect],
    client,
    template: PromptTemplate,
    task: str = "multimodal intent recognition",
    instructions: Mapping[str, str] | None = None,
    requery: bool = True,
) -> DescriptionSet:
    """One structured prompt per sample; the reply is split by section heading.

    Missing sections trigger one re-query; if still missing the set is
    returned with those descriptions empty and ``flagged`` set.
    """
    if not S:
        raise ValueError("describe needs a nonempty aspect set")
    call = _as_caller(client)
    prompt = describe_prompt(sample, S, template, task, instructions)
    messages = _user(_with_video(prompt, sample.video))
    aspects = _aspect_map(S)
    parse = lambda t: parse_descriptions(t, aspects)  # noqa: E731
    text = call(ChatRequest(messages, "describe", sample.sample_id), template, parse)
    desc = DescriptionSet(sample.sample_id, parse_descriptions(text, aspects))
    if desc.missing and requery:
        missing = ", ".join(aspects[m] for m in desc.missing)
        messages = messages + (
            {"role": "assistant", "content": text},
            {"role": "user", "content": f"Some sections were missing ({missing}). Answer again with every numbered section."},
        )
        text = call(ChatRequest(messages, "describe", sample.sample_id, attempt=1), template, parse)
        retry = parse_descriptions(text, aspects)
        merged = {k: desc.descriptions[k] or retry[k] for k in aspects}
        desc = DescriptionSet(sample.sample_id, merged)
    desc.flagged = bool(desc.missing)
    return desc


# step 3


def rank_prompt(desc: DescriptionSet, label: str, S: Sequence[SemanticAspect], template: PromptTemplate, task: str) -> str:
    names = ", ".join(f"{a.name} ({a.abbreviation})" for a in S)
    blocks = "\n".join(f"{a.name} ({a.abbreviation}): {desc.descriptions.get(a.abbreviation) or '(no description)'}" for a in S)
    example = " > ".join(a.abbreviation for a in S)
    return template.render(task=task, label=label, n_aspects=len(S), aspect_names=names, descriptions=blocks, example=example)


def rank(
    desc: DescriptionSet,
    label: str,
    S: Sequence[SemanticAspect],
    client,
    template: PromptTemplate,
    task: str = "multimodal intent recognition",
    fallback: Sequence[str] | None = None,
) -> RankRecord:
    """Ask for an importance ordering of ``S`` given the ground-truth label.

    A reply that is not a permutation of ``S`` is re-queried once; after
    that the ``fallback`` order is used (flagged) or :class:`RankParseError`
    is raised if no fallback is given.
    """
    if label is None:
        raise ValueError(f"sample {desc.sample_id} has no label; ranking is for labelled training data only")
    call = _as_caller(client)
    aspects = _aspect_map(S)
    slots = list(aspects)
    messages = _user(rank_prompt(desc, label, S, template, task))
    parse = lambda t: parse_ranking(t, aspects)  # noqa: E731
    text = call(ChatRequest(messages, "rank", desc.sample_id), template, parse)
    order = parse_ranking(text, aspects)
    if is_permutation(order, slots):
        return RankRecord(desc.sample_id, tuple(order))
    example = " > ".join(slots)
    messages = messages + (
        {"role": "assistant", "content": text},
        {"role": "user", "content": f"Reply with each of {', '.join(slots)} exactly once, formatted like {example}."},
    )
    text = call(ChatRequest(messages, "rank", desc.sample_id, attempt=1), template, parse)
    order = parse_ranking(text, aspects)
    if is_permutation(order, slots):
        return RankRecord(desc.sample_id, tuple(order), "requeried")
    if fallback is None:
        raise RankParseError(f"sample {desc.sample_id}: could not parse a ranking of {slots} from {text!r}")
    return RankRecord(desc.sample_id, tuple(fallback), "fallback")


def modal_ranking(records: Sequence[RankRecord], slots: Sequence[str]) -> tuple[str, ...]:
    """Most common ordering among ``records``; ties go to the lexicographically first order."""
    counts = Counter(r.order for r in records if r.flag != "fallback")
    if not counts:
        return tuple(slots)
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


# orchestration


@dataclass
class PipelineConfig:
    samples: str
    out_dir: str = "cot_out"
    cache_dir: str | None = None
    template_dir: str | None = None
    task: str = "multimodal intent recognition"
    endpoint: str | None = None
    model: str = "chat-model"
    describe_endpoint: str | None = None
    describe_model: str | None = None
    token_env: str = "SEMREL_CHAT_TOKEN"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60.0
    max_retries: int = 3
    discovery_subset: int = 50
    seed: int = 0
    top_k: int = 3
    aspects: list | None = None
    instructions: dict = field(default_factory=dict)
    rank_splits: list = field(default_factory=lambda: ["train"])
    max_in_flight: int = 4

    def __post_init__(self):
        if self.top_k < 1 or self.discovery_subset < 1 or self.max_in_flight < 1:
            raise ValueError("top_k, discovery_subset and max_in_flight must be >= 1")

    @classmethod
    def from_json(cls, obj: Mapping) -> "PipelineConfig":
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        cfg = cls.from_json(json.loads(path.read_text(encoding="utf-8")))
        for name in ("samples", "out_dir", "cache_dir", "template_dir"):
            val = getattr(cfg, name)
            if val is not None and not Path(val).is_absolute():
                setattr(cfg, name, str((path.parent / val).resolve()))
        return cfg

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else Path(self.out_dir) / "cache"


def read_samples(path) -> list[Sample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(Sample(str(obj["sample_id"]), obj["text"], obj.get("video", ""), obj.get("label"), obj.get("split", "train")))
            except (json.JSONDecodeError, KeyError) as exc:
                raise PipelineError(f"{path} line {i}: bad sample record ({exc})") from None
    ids = [s.sample_id for s in out]
    if len(set(ids)) != len(ids):
        raise PipelineError(f"{path}: duplicate sample ids")
    return sorted(out, key=lambda s: s.sample_id)


def make_clients(config: PipelineConfig, mock_dir=None) -> dict[str, Client]:
    if mock_dir is not None:
        mock = MockClient.from_dir(mock_dir, model="mock")
        return {"discover": mock, "describe": mock, "rank": mock}
    if not config.endpoint:
        raise PipelineError("pipeline config needs an 'endpoint' (or run with --mock)")
    common = dict(token_env=config.token_env, timeout=config.timeout, max_retries=config.max_retries,
                  temperature=config.temperature, max_tokens=config.max_tokens)
    text = ChatClient(config.endpoint, config.model, **common)
    video = ChatClient(config.describe_endpoint or config.endpoint, config.describe_model or config.model, **common)
    return {"discover": text, "describe": video, "rank": text}


def discovery_subset(samples: Sequence[Sample], n: int, seed: int) -> list[Sample]:
    if n >= len(samples):
        return list(samples)
    idx = np.sort(np.random.default_rng(seed).choice(len(samples), size=n, replace=False))
    return [samples[i] for i in idx]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class PipelineResult:
    aspects: list[SemanticAspect]
    selected: list[SemanticAspect]
    descriptions: list[DescriptionSet]
    rankings: list[RankRecord]
    rank_table: dict[str, list[int]] | None
    requests: int
    cache_hits: int
    paths: dict[str, Path]


class Pipeline:
    """Runs the steps of a :class:`PipelineConfig`, persisting each step's artifacts."""

    def __init__(self, config: PipelineConfig, clients: Mapping[str, Client] | None = None, mock_dir=None, resume: bool = False):
        self.config = config
        self.out = Path(config.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.templates = load_templates(config.template_dir)
        self.cache = ResponseCache(config.cache_path, repair=resume)
        clients = clients or make_clients(config, mock_dir)
        self.callers = {step: CachedCaller(c, self.cache) for step, c in clients.items()}
        self.samples = read_samples(config.samples)

    @property
    def requests(self) -> int:
        return sum(c.misses for c in self.callers.values())

    @property
    def cache_hits(self) -> int:
        return sum(c.hits for c in self.callers.values())

    def _map(self, fn, items):
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            return list(pool.map(fn, items))

    def run_discover(self) -> tuple[list[SemanticAspect], list[SemanticAspect]]:
        cfg = self.config
        flagged: list[str] = []
        if cfg.aspects:
            found = [SemanticAspect(a["name"], a["abbreviation"], int(a.get("frequency", 0))) for a in cfg.aspects]
            selected = list(found)
        else:
            subset = discovery_subset(self.samples, cfg.discovery_subset, cfg.seed)
            found = discover(subset, self.callers["discover"], self.templates["discover"], cfg.task, flagged)
            selected = select_top_k(found, cfg.top_k)
        _write_json(
            self.out / "aspects.json",
            {
                "discovered": [asdict(a) for a in found],
                "selected": [asdict(a) for a in selected],
                "flagged": sorted(flagged),
            },
        )
        return found, selected

    def load_selected(self) -> list[SemanticAspect]:
        path = self.out / "aspects.json"
        if not path.exists():
            raise PipelineError(f"{path} not found; run the discover step first")
        return [SemanticAspect(**a) for a in json.loads(path.read_text(encoding="utf-8"))["selected"]]

    def run_describe(self, S: Sequence[SemanticAspect]) -> list[DescriptionSet]:
        cfg = self.config
        caller, template = self.callers["describe"], self.templates["describe"]
        descs = self._map(lambda s: describe(s, S, caller, template, cfg.task, cfg.instructions), self.samples)
        descs.sort(key=lambda d: d.sample_id)
        _write_jsonl(self.out / "descriptions.jsonl", (asdict(d) for d in descs))
        return descs

    def load_descriptions(self) -> list[DescriptionSet]:
        path = self.out / "descriptions.jsonl"
        if not path.exists():
            raise PipelineError(f"{path} not found; run the describe step first")
        return [DescriptionSet(**row) for row in _read_jsonl(path)]

    def run_rank(self, S: Sequence[SemanticAspect], descs: Sequence[DescriptionSet]):
        cfg = self.config
        caller, template = self.callers["rank"], self.templates["rank"]
        by_id = {s.sample_id: s for s in self.samples}
        todo = [d for d in descs if by_id[d.sample_id].label is not None and by_id[d.sample_id].split in cfg.rank_splits]

        def one(d):
            try:
                return rank(d, by_id[d.sample_id].label, S, caller, template, cfg.task)
            except RankParseError as exc:
                log.warning("%s", exc)
                return RankRecord(d.sample_id, (), "unparsed")

        records = self._map(one, todo)
        slots = [a.abbreviation for a in S]
        modal = modal_ranking([r for r in records if r.flag != "unparsed"], slots)
        records = [RankRecord(r.sample_id, modal, "fallback") if r.flag == "unparsed" else r for r in records]
        records.sort(key=lambda r: r.sample_id)
        _write_jsonl(self.out / "rankings.jsonl", ({"sample_id": r.sample_id, "order": list(r.order), "flag": r.flag} for r in records))
        table = None
        if records:
            table = rank_stats(records, slots)
            (self.out / "rank_stats.txt").write_text(format_rank_table(table), encoding="utf-8")
            with (self.out / "rank_stats.csv").open("w", encoding="utf-8") as fh:
                fh.write("slot," + ",".join(f"rank{i + 1}" for i in range(len(slots))) + "\n")
                for s, counts in table.items():
                    fh.write(s + "," + ",".join(map(str, counts)) + "\n")
        return records, table

    def run(self, steps: Sequence[str] = ("discover", "describe", "rank")) -> PipelineResult:
        found = selected = None
        descs, records, table = [], [], None
        if "discover" in steps:
            found, selected = self.run_discover()
        else:
            selected = self.load_selected()
            found = selected
        if "describe" in steps:
            descs = self.run_describe(selected)
        elif "rank" in steps:
            descs = self.load_descriptions()
        if "rank" in steps:
            records, table = self.run_rank(selected, descs)
        paths = {p.name: p for p in sorted(self.out.glob("*")) if p.is_file()}
        log.info("pipeline done: %d requests, %d cache hits", self.requests, self.cache_hits)
        return PipelineResult(found, selected, descs, records, table, self.requests, self.cache_hits, paths)


def run_pipeline(config: PipelineConfig, clients=None, mock_dir=None, resume: bool = False, steps=("discover", "describe", "rank")) -> PipelineResult:
    return Pipeline(config, clients, mock_dir, resume).run(steps)
