"""Report writers: JSON + plain-text tables, confusion CSVs, checkpoints and figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .metrics import MetricsReport

if TYPE_CHECKING:
    from .trainer import AblationResult, Dataset, TrainResult

SPLITS = ("train", "dev", "test")


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def metrics_table(rows: dict[str, MetricsReport], title: str = "") -> str:
    keys = list(MetricsReport.HEADLINE)
    width = max([len(n) for n in rows] + [5])
    lines = [title] if title else []
    lines.append(f"{'':<{width}}  " + "  ".join(f"{MetricsReport.SHORT[k]:>7}" for k in keys))
    for name, rep in rows.items():
        h = rep.headline()
        lines.append(f"{name:<{width}}  " + "  ".join(f"{h[k]:7.2f}" for k in keys))
    return "\n".join(lines)


def write_confusion_csv(report: MetricsReport, labels, path: Path) -> None:
    cm = np.asarray(report.confusion)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *labels])
        for label, row in zip(labels, cm):
            w.writerow([label, *(int(v) for v in row)])


def plot_confusion(report: MetricsReport, labels, path: Path, title: str = "") -> None:
    plt = _pyplot()
    cm = np.asarray(report.confusion, dtype=float)
    norm = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 0.45 * len(labels), 1.0 + 0.45 * len(labels)))
    im = ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(labels)), labels, rotation=90, fontsize=7)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(result: "TrainResult", path: Path) -> None:
    plt = _pyplot()
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    for run in result.runs:
        epochs = range(1, len(run.curves["train_loss"]) + 1)
        ax1.plot(epochs, run.curves["train_loss"], label=f"train seed {run.seed}")
        ax1.plot(epochs, run.curves["dev_objective"], linestyle="--", label=f"dev seed {run.seed}")
        ax2.plot(epochs, run.curves["dev_weighted_f1"], label=f"seed {run.seed}")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("dev weighted F1")
    ax1.legend(fontsize=6)
    ax2.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_checkpoint(params: dict[str, np.ndarray], meta: dict, path: Path) -> None:
    np.savez(path, **params)
    dump_json(meta, path.with_suffix(".json"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path) as z:
        params = {k: z[k] for k in z.files}
    meta_path = path.with_suffix(".json")
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    return params, meta


def write_train_outputs(result: "TrainResult", data: "Dataset", out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"report_json": out_dir / "report.json", "report_txt": out_dir / "report.txt"}
    dump_json(result.summary(), paths["report_json"])

    variant = result.config.variant.label
    text = [metrics_table(result.mean, f"{variant}, mean over seeds {result.config.seeds}")]
    if result.mean_rank_agreement:
        text.append("rank agreement (Kendall tau): " + ", ".join(f"{k} {v:.3f}" for k, v in result.mean_rank_agreement.items()))
    notes = sorted({n for rep in result.mean.values() for n in rep.notes})
    text.extend(f"note: {n}" for n in notes)
    paths["report_txt"].write_text("\n".join(text) + "\n", encoding="utf-8")

    best = result.best
    for split, rep in best.reports.items():
        p = out_dir / f"confusion_{split}.csv"
        write_confusion_csv(rep, data.labels, p)
        paths[f"confusion_{split}"] = p
    if "test" in best.reports:
        paths["confusion_png"] = out_dir / "confusion_test.png"
        plot_confusion(best.reports["test"], data.labels, paths["confusion_png"], f"{variant} seed {best.seed}, test")
    paths["curves_png"] = out_dir / "curves.png"
    plot_curves(result, paths["curves_png"])

    paths["checkpoint"] = out_dir / "best.npz"
    meta = {
        "variant": result.config.variant.kind,
        "drop_relation": result.config.variant.drop_relation,
        "seed": best.seed,
        "best_epoch": best.best_epoch,
        "K": data.K,
        "labels": data.labels,
        "slots": list(data.slots),
        "config": result.config.to_json(),
    }
    save_checkpoint(best.params, meta, paths["checkpoint"])
    return paths


def ablation_table(result: "AblationResult", split: str = "test") -> str:
    rows = {name: res.mean[split] for name, res in result.results.items()}
    text = [metrics_table(rows, f"ablations ({split}, mean over seeds)")]
    if "full" in result.results:
        keys = list(MetricsReport.HEADLINE)
        text.append("")
        text.append("delta vs full")
        for name, d in result.deltas(split).items():
            text.append(f"{name:<22}" + "  ".join(f"{MetricsReport.SHORT[k]} {d[k]:+.2f}" for k in keys))
    agree = {n: r.mean_rank_agreement.get(split) for n, r in result.results.items() if r.mean_rank_agreement}
    if agree:
        text.append("")
        text.append("rank agreement: " + ", ".join(f"{n} {v:.3f}" for n, v in agree.items()))
    return "\n".join(text)


def plot_ablation(result: "AblationResult", path: Path, split: str = "test", metric: str = "weighted_f1") -> None:
    plt = _pyplot()
    names = list(result.results)
    vals = [getattr(result.results[n].mean[split], metric) for n in names]
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(names), 3.5))
    ax.bar(range(len(names)), vals, color=["tab:red" if n == "full" else "tab:blue" for n in names])
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel(f"{split} {metric}")
    lo = min(vals)
    ax.set_ylim(max(0.0, lo - 5), 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_ablation_outputs(result: "AblationResult", out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "ablation_json": out_dir / "ablation.json",
        "ablation_txt": out_dir / "ablation.txt",
        "ablation_png": out_dir / "ablation.png",
    }
    dump_json(result.summary(), paths["ablation_json"])
    paths["ablation_txt"].write_text(ablation_table(result) + "\n", encoding="utf-8")
    plot_ablation(result, paths["ablation_png"])
    return paths
