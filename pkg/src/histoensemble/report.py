"""Tables, plots, and JSON summaries for a finished experiment.

CSV and JSON files hold fractions at full float precision so every number
can be recomputed from the stored predictions; ``tables.md`` renders the
same tables as percentages with two decimals.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import STAGES, ExperimentResult  # noqa: E402
from .metrics import ConfusionMatrix  # noqa: E402

FIGSIZE = (8.0, 6.0)
DPI = 100


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def _pct(v) -> str:
    return "-" if v is None else f"{100.0 * v:.2f}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _leaderboard_rows(board):
    rows = []
    for cid in board.classifiers:
        rows.append([cid, *[_num(board.cell(cid, b)) for b in board.backbones], _num(board.row_averages[cid])])
    return rows


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(x) for x in r) + " |" for r in rows]
    return "\n".join(lines)


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
    plt.close(fig)


def emit_report(result: ExperimentResult, out_dir) -> list[str]:
    """Write every report artifact into ``out_dir``; returns the file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    def done(name):
        written.append(name)
        return out / name

    names = result.class_names
    backbones = [b["backbone_id"] for b in result.config["backbones"]]
    modes = list(result.ensemble_accuracy)
    fm = result.final_metrics
    md = []

    # leaderboards (accuracy grid + average column)
    header = ["classifier", *result.test_leaderboard.backbones, "average"]
    _write_csv(done("leaderboard.csv"), header, _leaderboard_rows(result.leaderboard))
    _write_csv(done("leaderboard_test.csv"), header, _leaderboard_rows(result.test_leaderboard))
    boards = [("Test accuracy", result.test_leaderboard)]
    if result.validation_leaderboard is not None:
        _write_csv(done("leaderboard_validation.csv"), header, _leaderboard_rows(result.validation_leaderboard))
        boards.insert(0, ("Validation accuracy (HPF ranking)", result.validation_leaderboard))
    for title, board in boards:
        rows = [[c, *[_pct(board.cell(c, b)) for b in board.backbones], _pct(board.row_averages[c])]
                for c in board.classifiers]
        md += [f"## {title} (%)", "", _md_table(header, rows), ""]
    md += [f"HPF selection: {', '.join(result.selection.selected)} "
           f"(criterion {result.selection.criterion}, top {result.selection.top_k})", ""]

    # ensemble accuracy per mode and backbone, then per-backbone averages over modes
    ens_header = ["mode", *backbones, "average"]
    ens_rows = []
    for m in modes:
        accs = [result.ensemble_accuracy[m][b] for b in backbones]
        ens_rows.append([m, *map(_num, accs), _num(math.fsum(accs) / len(accs))])
    _write_csv(done("ensemble_accuracy.csv"), ens_header, ens_rows)
    tl_rows = [[m, *[_num(result.ensemble_accuracy[m][b]) for b in backbones]] for m in modes]
    tl_rows.append(["average", *[_num(math.fsum(result.ensemble_accuracy[m][b] for m in modes) / len(modes))
                                 for b in backbones]])
    _write_csv(done("backbone_accuracy.csv"), ["row", *backbones], tl_rows)
    md += ["## Ensemble accuracy (%)", "",
           _md_table(ens_header, [[r[0], *[_pct(float(x)) for x in r[1:]]] for r in ens_rows]), "",
           f"Chosen: backbone {result.chosen_backbone}, {result.chosen_mode} voting", ""]

    # final metrics
    metrics = {"final": fm.to_dict(), "cv_folds": [b.to_dict() for b in result.cv_folds],
               "cv_aggregate": result.cv_aggregate, "chosen_backbone": result.chosen_backbone,
               "chosen_mode": result.chosen_mode}
    done("metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    keys = ["accuracy", "precision_macro", "recall_macro", "f1_macro", "mae", "mse", "rmse", "auc_macro"]
    md += ["## Final model (%)", "", _md_table(keys, [[_pct(getattr(fm, k)) for k in keys]]), ""]

    cm = ConfusionMatrix(np.array(fm.confusion, dtype=np.int64))
    _write_csv(done("confusion_counts.csv"), ["actual\\predicted", *names],
               [[names[i], *map(int, row)] for i, row in enumerate(cm.counts)])
    _write_csv(done("confusion_row_pct.csv"), ["actual\\predicted", *names],
               [[names[i], *map(_num, row)] for i, row in enumerate(cm.row_percentages())])
    _write_csv(done("confusion_total_pct.csv"), ["actual\\predicted", *names],
               [[names[i], *map(_num, row)] for i, row in enumerate(cm.total_percentages())])
    _write_csv(done("ovr_rates.csv"), ["class", "tp_pct", "tn_pct", "fp_pct", "fn_pct"],
               [[names[c], *[_num(r[k]) for k in ("tp", "tn", "fp", "fn")]]
                for c, r in enumerate(cm.ovr_rate_percentages())])

    fig, ax = plt.subplots(figsize=FIGSIZE)
    im = ax.imshow(cm.counts, cmap="Blues")
    for i in range(cm.k):
        for j in range(cm.k):
            ax.text(j, i, f"{cm.counts[i, j]}\n{cm.total_percentages()[i, j]:.2f}%", ha="center", va="center",
                    color="white" if cm.counts[i, j] > cm.counts.max() / 2 else "black", fontsize=9)
    ax.set_xticks(range(cm.k), names, rotation=30, ha="right")
    ax.set_yticks(range(cm.k), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("Actual")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    _save(fig, done("confusion.png"))

    # ROC
    roc_rows = []
    fig, ax = plt.subplots(figsize=FIGSIZE)
    for c, name in enumerate(names):
        pts = fm.roc_points.get(name)
        if not pts:
            continue
        roc_rows += [[name, _num(x), _num(y)] for x, y in pts]
        xs, ys = zip(*pts)
        auc = fm.per_class[c]["auc"]
        ax.plot(xs, ys, label=f"{name} (AUC {_pct(auc)}%)")
    ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC, macro AUC {_pct(fm.auc_macro)}%")
    ax.legend(loc="lower right")
    fig.tight_layout()
    _save(fig, done("roc.png"))
    _write_csv(done("roc.csv"), ["class", "fpr", "tpr"], roc_rows)

    # bar charts
    for fname, labels, values, title in (
        ("metrics_bar.png", ["accuracy", "precision", "recall", "f1"],
         [fm.accuracy, fm.precision_macro, fm.recall_macro, fm.f1_macro], "Performance"),
        ("errors_bar.png", ["MAE", "MSE", "RMSE"], [fm.mae, fm.mse, fm.rmse], "Error"),
    ):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        bars = ax.bar(labels, [100 * v for v in values], color="tab:blue")
        ax.bar_label(bars, fmt="%.2f%%")
        ax.set_ylabel("%")
        ax.set_title(title)
        fig.tight_layout()
        _save(fig, done(fname))

    fig, ax = plt.subplots(figsize=FIGSIZE)
    width = 0.8 / max(len(modes), 1)
    x = np.arange(len(backbones))
    for i, m in enumerate(modes):
        ax.bar(x + i * width, [100 * result.ensemble_accuracy[m][b] for b in backbones], width, label=m)
    ax.set_xticks(x + width * (len(modes) - 1) / 2, backbones)
    ax.set_ylabel("accuracy (%)")
    ax.legend()
    fig.tight_layout()
    _save(fig, done("ensemble_accuracy.png"))

    fig, ax = plt.subplots(figsize=FIGSIZE)
    board = result.test_leaderboard
    width = 0.8 / max(len(board.backbones), 1)
    x = np.arange(len(board.classifiers))
    for i, b in enumerate(board.backbones):
        ax.bar(x + i * width, [100 * (board.cell(c, b) or 0.0) for c in board.classifiers], width, label=b)
    ax.set_xticks(x + width * (len(board.backbones) - 1) / 2, board.classifiers)
    ax.set_ylabel("test accuracy (%)")
    ax.legend()
    fig.tight_layout()
    _save(fig, done("leaderboard.png"))

    # prediction time on the chosen backbone's test data
    pred_t = result.timings["predict"][result.chosen_backbone]
    rows = []
    for model, secs in [*[(c, pred_t[c]) for c in result.test_leaderboard.classifiers],
                        ("proposed_model", pred_t[f"ensemble_{result.chosen_mode}"])]:
        rows.append([model, _num(secs), int(round(secs)), _num(1000.0 * secs)])
    _write_csv(done("timing.csv"), ["model", "prediction_seconds", "prediction_seconds_rounded",
                                    "prediction_ms"], rows)
    stages = result.timings["stages"]
    stage_rows = [[k, _num(stages[k])] for k in STAGES if k in stages]
    _write_csv(done("stage_timing.csv"), ["stage", "seconds"], stage_rows)

    shape_rows = [[b, *s] for b, s in result.feature_shapes.items()]
    _write_csv(done("feature_shapes.csv"), ["backbone", "n", "d"], shape_rows)

    done("summary.json").write_text(json.dumps(result.summary_dict(), indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    done("tables.md").write_text("\n".join(md) + "\n", encoding="utf-8")

    manifest = sorted(written) + ["report_manifest.json"]
    (out / "report_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest
