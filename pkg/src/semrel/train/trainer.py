from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from ..core.tape import Tape
from ..data import FeatureRecord, SynthSpec, load, load_manifest, synthesize, to_arrays
from ..ranking import SinkhornConfig
from ..srr import Batch, Variant, forward, init_params, loss_on_tape
from .metrics import MetricsReport, average_reports, compute_metrics
from .optim import AdamWState, adamw_step

log = logging.getLogger(__name__)

# learning rates used for full-size encoder fine-tuning on the two benchmarks
BENCHMARK_LR = {"mintrec2": 6e-6, "iemocap-da": 1e-5}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    data: str | None = None
    synth: SynthSpec | None = None
    d: int | None = None
    h: int | None = None
    K: int | None = None
    lam: float = 1.0
    tau: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    seeds: list[int] = field(default_factory=lambda: [0])
    no_rank_loss: bool = False
    no_srr: bool = False
    classic_mode: str | None = None
    drop_relation: str | None = None
    sinkhorn_iters: int = 30
    sinkhorn_tol: float = 1e-6
    out_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.synth, Mapping):
            self.synth = SynthSpec.from_json(self.synth)
        self.betas = tuple(self.betas)
        self.seeds = list(self.seeds)
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for name in ("lr", "batch_size", "epochs", "tau", "sinkhorn_iters"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lam", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.data is None and self.synth is None:
            raise ValueError("config needs either a dataset manifest ('data') or a 'synth' spec")
        self.variant  # validates toggle combinations

    @property
    def variant(self) -> Variant:
        if sum([self.no_srr, self.classic_mode is not None, self.drop_relation is not None]) > 1:
            raise ValueError("no_srr, classic_mode and drop_relation are mutually exclusive")
        if self.no_srr:
            return Variant("concat")
        if self.classic_mode is not None:
            return Variant(self.classic_mode)
        return Variant("srr", self.drop_relation)

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.no_rank_loss else self.lam

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(self.sinkhorn_iters, self.sinkhorn_tol)

    @classmethod
    def from_json(cls, obj: Mapping) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_json(json.loads(path.read_text(encoding="utf-8")))
        if cfg.data is not None and not Path(cfg.data).is_absolute():
            cfg.data = str((path.parent / cfg.data).resolve())
        return cfg

    def to_json(self) -> dict:
        out = asdict(self)
        out["synth"] = None if self.synth is None else self.synth.to_json()
        out["betas"] = list(self.betas)
        return out


@dataclass
class SplitData:
    X: np.ndarray
    y: np.ndarray
    relevance: np.ndarray | None
    ids: list[str]

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_records(cls, records: Sequence[FeatureRecord], fine_slots=None) -> "SplitData":
        X, y, rel = to_arrays(records, fine_slots)
        return cls(X, y, rel, [r.sample_id for r in records])


@dataclass
class Dataset:
    splits: dict[str, SplitData]
    K: int
    labels: list[str]
    slots: tuple[str, ...]

    @property
    def d(self) -> int:
        return self.splits["train"].X.shape[-1]


def load_data(config: RunConfig) -> Dataset:
    if config.data is not None:
        m = load_manifest(config.data)
        records = load(config.data)
        fine, K, labels = m.fine_slots, m.K, m.labels
    else:
        spec = config.synth
        records = synthesize(spec)
        fine, K, labels = spec.fine_slots, spec.K, [f"class_{k}" for k in range(spec.K)]
    for need in ("train", "dev", "test"):
        if need not in records:
            raise ValueError(f"dataset has no {need!r} split")
    ds = Dataset({k: SplitData.from_records(v, fine) for k, v in records.items()}, K, labels, ("T", *fine))
    if config.d is not None and config.d != ds.d:
        raise ValueError(f"config d={config.d} but data has d={ds.d}")
    if config.K is not None and config.K != ds.K:
        raise ValueError(f"config K={config.K} but data has K={ds.K}")
    return ds


def _vars(tape: Tape, params: Mapping[str, np.ndarray], trainable: bool):
    make = tape.var if trainable else tape.constant
    return {k: make(v) for k, v in params.items()}


def predict(params, X: np.ndarray, variant: Variant = Variant(), chunk: int = 1024):
    """(predicted labels, alpha or None)."""
    preds, alphas = [], []
    for start in range(0, len(X), chunk):
        tape = Tape()
        out = forward(tape.constant(X[start : start + chunk]), _vars(tape, params, False), variant)
        preds.append(out.logits.value.argmax(axis=-1))
        if out.alpha is not None:
            alphas.append(out.alpha.value)
    return np.concatenate(preds), (np.concatenate(alphas) if alphas else None)


def evaluate(params, split: SplitData, K: int, variant: Variant = Variant()) -> MetricsReport:
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred, _ = predict(params, split.X, variant)
    return compute_metrics(split.y, pred, K)


def kendall_tau_batch(scores: np.ndarray, relevance: np.ndarray) -> np.ndarray:
    """Per-row Kendall tau-a between two score vectors (ties count 0)."""
    n = scores.shape[-1]
    iu = np.triu_indices(n, 1)
    ds = np.sign(scores[:, :, None] - scores[:, None, :])[:, iu[0], iu[1]]
    dr = np.sign(relevance[:, :, None] - relevance[:, None, :])[:, iu[0], iu[1]]
    return (ds * dr).mean(axis=-1)


def rank_agreement(params, split: SplitData, variant: Variant = Variant()) -> float:
    """Mean Kendall tau between the learned importance ordering and stored rankings."""
    if split.relevance is None:
        raise ValueError("split has no rankings")
    if not variant.has_importance:
        raise ValueError(f"variant {variant.label} produces no importance scores")
    _, alpha = predict(params, split.X, variant)
    return float(kendall_tau_batch(alpha, split.relevance).mean())


def objective(params, split: SplitData, config: RunConfig, variant: Variant, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, len(split), chunk):
        sl = slice(start, start + chunk)
        rel = None if split.relevance is None else split.relevance[sl]
        tape = Tape()
        loss, _ = loss_on_tape(
            tape, _vars(tape, params, False), Batch(split.X[sl], split.y[sl], rel),
            variant, config.effective_lam, config.tau, config.sinkhorn,
        )
        total += float(loss.value) * len(split.y[sl])
    return total / len(split)


@dataclass
class RunResult:
    seed: int
    variant: str
    params: dict[str, np.ndarray]
    best_epoch: int
    reports: dict[str, MetricsReport]
    rank_agreement: dict[str, float]
    curves: dict[str, list[float]]
    seconds: float

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "best_epoch": self.best_epoch,
            "seconds": round(self.seconds, 3),
            "metrics": {k: r.to_json() for k, r in self.reports.items()},
            "rank_agreement": self.rank_agreement,
            "curves": self.curves,
        }


@dataclass
class TrainResult:
    config: RunConfig
    runs: list[RunResult]
    mean: dict[str, MetricsReport]
    mean_rank_agreement: dict[str, float]

    @property
    def best(self) -> RunResult:
        return max(self.runs, key=lambda r: r.reports["dev"].weighted_f1)

    def summary(self) -> dict:
        return {
            "config": self.config.to_json(),
            "variant": self.config.variant.label,
            "mean": {k: r.to_json() for k, r in self.mean.items()},
            "mean_rank_agreement": self.mean_rank_agreement,
            "runs": [r.summary() for r in self.runs],
        }


def train_seed(config: RunConfig, data: Dataset, seed: int) -> RunResult:
    """Train one seed; keeps the checkpoint with the best dev weighted F1.

    Ties on dev weighted F1 go to the lower dev objective.
    """
    t0 = time.perf_counter()
    variant = config.variant
    rng = np.random.default_rng(seed)
    n_fine = len(data.slots) - 1
    params = init_params(variant.kind, data.d, data.K, h=config.h, n_fine=n_fine, rng=rng)
    state = AdamWState()
    train, dev = data.splits["train"], data.splits["dev"]
    lam = config.effective_lam
    curves = {"train_loss": [], "dev_objective": [], "dev_weighted_f1": [], "dev_acc": []}
    best_key, best_params, best_epoch = None, params, 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        epoch_loss = 0.0
        for b, start in enumerate(range(0, len(train), config.batch_size)):
            idx = order[start : start + config.batch_size]
            rel = None if train.relevance is None else train.relevance[idx]
            tape = Tape()
            pv = _vars(tape, params, True)
            loss, _ = loss_on_tape(tape, pv, Batch(train.X[idx], train.y[idx], rel), variant, lam, config.tau, config.sinkhorn)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(
                    f"non-finite loss (lr={config.lr}, epoch={epoch}, batch={b}, seed={seed}, variant={variant.label})"
                )
            tape.backward(loss)
            grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pv.items()}
            params, state = adamw_step(params, grads, state, config.lr, config.betas, config.eps, config.weight_decay)
            epoch_loss += float(loss.value) * len(idx)
        dev_report = evaluate(params, dev, data.K, variant)
        dev_obj = objective(params, dev, config, variant)
        curves["train_loss"].append(epoch_loss / len(train))
        curves["dev_objective"].append(dev_obj)
        curves["dev_weighted_f1"].append(dev_report.weighted_f1)
        curves["dev_acc"].append(dev_report.acc)
        key = (dev_report.weighted_f1, -dev_obj)
        if best_key is None or key > best_key:
            best_key, best_params, best_epoch = key, params, epoch
        log.debug("seed %d epoch %d loss %.5f dev wf1 %.2f", seed, epoch, epoch_loss / len(train), dev_report.weighted_f1)

    reports = {name: evaluate(best_params, split, data.K, variant) for name, split in data.splits.items()}
    agreement = {}
    if variant.has_importance:
        agreement = {
            name: rank_agreement(best_params, split, variant)
            for name, split in data.splits.items()
            if split.relevance is not None
        }
    return RunResult(seed, variant.label, best_params, best_epoch, reports, agreement, curves, time.perf_counter() - t0)


def train(config: RunConfig, data: Dataset | None = None) -> TrainResult:
    """Train once per configured seed and average the reports."""
    data = data or load_data(config)
    runs = []
    for seed in config.seeds:
        run = train_seed(config, data, seed)
        log.info(
            "%s seed %d: test acc %.2f wf1 %.2f (best epoch %d, %.1fs)",
            run.variant, seed, run.reports["test"].acc, run.reports["test"].weighted_f1, run.best_epoch, run.seconds,
        )
        runs.append(run)
    mean = {name: average_reports([r.reports[name] for r in runs]) for name in runs[0].reports}
    mean_agree = {}
    if runs[0].rank_agreement:
        mean_agree = {k: float(np.mean([r.rank_agreement[k] for r in runs])) for k in runs[0].rank_agreement}
    result = TrainResult(config, runs, mean, mean_agree)
    if config.out_dir:
        from .report import write_train_outputs

        write_train_outputs(result, data, Path(config.out_dir))
    return result


ABLATIONS: dict[str, dict] = {
    "full": {},
    "no_rank_loss": {"no_rank_loss": True},
    "no_srr": {"no_srr": True},
    "drop_importance": {"drop_relation": "importance"},
    "drop_complementarity": {"drop_relation": "complementarity"},
    "drop_inconsistency": {"drop_relation": "inconsistency"},
    "classic_Or": {"classic_mode": "Or"},
    "classic_And": {"classic_mode": "And"},
    "classic_Not": {"classic_mode": "Not"},
    "classic_Combination": {"classic_mode": "Combination"},
}


@dataclass
class AblationResult:
    results: dict[str, TrainResult]

    def deltas(self, split: str = "test") -> dict[str, dict[str, float]]:
        """Headline metric differences of each setting relative to ``full``."""
        base = self.results["full"].mean[split].headline()
        return {
            name: {k: res.mean[split].headline()[k] - base[k] for k in base}
            for name, res in self.results.items()
            if name != "full"
        }

    def summary(self) -> dict:
        return {
            "settings": {name: res.summary() for name, res in self.results.items()},
            "deltas_test": self.deltas("test") if "full" in self.results else {},
        }


def ablate(config: RunConfig, settings: Sequence[str] | None = None, data: Dataset | None = None) -> AblationResult:
    """Train the full model and each requested ablation on the same data."""
    settings = list(settings or ABLATIONS)
    if "full" not in settings:
        settings.insert(0, "full")
    unknown = [s for s in settings if s not in ABLATIONS]
    if unknown:
        raise ValueError(f"unknown ablation settings {unknown}; choose from {list(ABLATIONS)}")
    data = data or load_data(config)
    base = replace(config, out_dir=None, no_rank_loss=False, no_srr=False, classic_mode=None, drop_relation=None)
    results = {name: train(replace(base, **ABLATIONS[name]), data) for name in settings}
    out = AblationResult(results)
    if config.out_dir:
        from .report import write_ablation_outputs

        write_ablation_outputs(out, Path(config.out_dir))
    return out
