"""Confusion matrices, Se / PPV / F1, and report files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .records import CLASS_NAMES, NUM_CLASSES


def confusion_matrix(y_true, y_pred, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
    if y_true.size and (y_true.min() < 0 or y_true.max() >= num_classes):
        raise ValueError("confusion_matrix: true labels out of range (unlabeled samples?)")
    return np.bincount(y_true * num_classes + y_pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def f1_score(se: float | None, ppv: float | None) -> float | None:
    if se is None:
        return None
    ppv = 0.0 if ppv is None else ppv
    return 2 * se * ppv / (se + ppv) if se + ppv > 0 else 0.0


@dataclass
class MetricsReport:
    se: dict[str, float | None]
    ppv: dict[str, float | None]
    f1: dict[str, float | None]
    overall_accuracy: float
    total: int
    dataset: str = ""
    model: str = ""
    augmented: bool = True
    extra: dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        vals = [v for v in self.f1.values() if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        r = lambda v: None if v is None else round(float(v), 2)  # noqa: E731
        return {
            "dataset": self.dataset,
            "model": self.model,
            "augmented": bool(self.augmented),
            "overall_accuracy": r(self.overall_accuracy),
            "classes": {c: {"se": r(self.se[c]), "ppv": r(self.ppv[c]), "f1": r(self.f1[c])} for c in CLASS_NAMES},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        classes = d["classes"]
        return cls(
            se={c: classes[c]["se"] for c in CLASS_NAMES},
            ppv={c: classes[c]["ppv"] for c in CLASS_NAMES},
            f1={c: classes[c]["f1"] for c in CLASS_NAMES},
            overall_accuracy=d["overall_accuracy"], total=0,
            dataset=d.get("dataset", ""), model=d.get("model", ""), augmented=d.get("augmented", True),
        )


def metrics_from_confusion(cm: np.ndarray, dataset: str = "", model: str = "", augmented: bool = True) -> MetricsReport:
    """Percentages at full precision. Se is ``None`` for a class with no true samples,
    PPV is ``None`` for a class that is never predicted."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    true_n = cm.sum(axis=1)
    pred_n = cm.sum(axis=0)
    se, ppv, f1 = {}, {}, {}
    for k, name in enumerate(CLASS_NAMES[: len(cm)]):
        se[name] = 100.0 * tp[k] / true_n[k] if true_n[k] else None
        ppv[name] = 100.0 * tp[k] / pred_n[k] if pred_n[k] else None
        f1[name] = f1_score(se[name], ppv[name])
    total = int(cm.sum())
    acc = 100.0 * tp.sum() / total if total else 0.0
    return MetricsReport(se, ppv, f1, acc, total, dataset, model, augmented)


def evaluate(model, dataset, name: str = "", model_id: str = "", augmented: bool = True):
    """Run ``model`` over a labeled dataset; returns (confusion matrix, report). Parameters are not touched."""
    if len(dataset) == 0 or (dataset.labels < 0).any():
        raise ValueError("evaluate needs a fully labeled dataset")
    out = model.predict(dataset.waveforms, dataset.time_feats)
    cm = confusion_matrix(dataset.labels, out["pred"])
    return cm, metrics_from_confusion(cm, name, model_id, augmented)


def write_confusion_csv(cm: np.ndarray, path) -> None:
    lines = ["," + ",".join(CLASS_NAMES)]
    lines += [CLASS_NAMES[i] + "," + ",".join(str(int(v)) for v in row) for i, row in enumerate(cm)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_confusion_csv(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").strip().splitlines()[1:]
    return np.array([[int(v) for v in r.split(",")[1:]] for r in rows], dtype=np.int64)


def plot_confusion(cm: np.ndarray, path, title: str = "") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    frac = cm / np.maximum(cm.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    ax.set_xticks(range(len(cm)), CLASS_NAMES[: len(cm)])
    ax.set_yticks(range(len(cm)), CLASS_NAMES[: len(cm)])
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(len(cm)):
        for j in range(len(cm)):
            ax.text(j, i, f"{cm[i, j]}\n{100 * frac[i, j]:.1f}%", ha="center", va="center", fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: MetricsReport, cm: np.ndarray, out_dir, plot: bool = False, prefix: str = "") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}metrics.json", out / f"{prefix}confusion.csv"]
    paths[0].write_text(report.to_json(), encoding="utf-8")
    write_confusion_csv(cm, paths[1])
    if plot:
        paths.append(out / f"{prefix}confusion.png")
        plot_confusion(cm, paths[-1], title=report.dataset)
    return paths
