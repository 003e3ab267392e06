"""Study runners: body-weight ablation, frequency-loss grid, loss matrix.

Each grid cell trains one model into its own run directory (config + log +
checkpoint + metrics), so every report can be regenerated later from the
metrics files alone without retraining.  Charts are rendered to SVG and PNG;
the CSVs next to them are the source of truth.
"""

import json
import os
from dataclasses import dataclass, replace

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from kv2mv import metrics, trainer  # noqa: E402
from kv2mv.losses import LossSpec  # noqa: E402
from kv2mv.model import ModelConfig  # noqa: E402
from kv2mv.trainer import TrainConfig  # noqa: E402

WEIGHT_GRID = (1, 25, 50, 100)
FFL_GRID = (0.5, 1.0, 1.5)

# the seven loss combinations of the comparison table
LOSS_MATRIX = (
    ("l1w",),
    ("l1w", "ssim"),
    ("l1w", "ms_ssim"),
    ("l1w", "mse"),
    ("ffl",),
    ("l1w", "ffl"),
    ("l1w", "ssim", "ffl"),
)

IDENTITY_ID = "identity"


@dataclass
class ExperimentPlan:
    name: str
    grid: list  # of (LossSpec, dataset tag) cells
    model_config: ModelConfig
    train_config: TrainConfig
    output_dir: str

    def __post_init__(self):
        if not self.grid:
            raise ValueError("experiment grid must be non-empty")
        names = [run_name(spec, tag) for spec, tag in self.grid]
        if len(set(names)) != len(names):
            raise ValueError("experiment grid cells must be unique")


def run_name(loss_spec: LossSpec, dataset_tag: str) -> str:
    return f"{loss_spec.loss_id}__{dataset_tag}".replace("+", "_")


def evaluate_model(net, pairs, dataset_tag, loss_spec_id, split="Ts"):
    """Per-slice masked metrics for a model over a list of pairs."""
    preds = trainer.predict_pairs(net, pairs)
    return [
        metrics.slice_record(
            pred,
            p.mv,
            p.body_mask,
            patient_id=p.patient_id,
            slice_index=p.slice_index,
            is_artifact=p.is_artifact,
            dataset_tag=dataset_tag,
            split=split,
            loss_spec_id=loss_spec_id,
        )
        for pred, p in zip(preds, pairs)
    ]


def identity_records(pairs, dataset_tag, split="Ts"):
    """Baseline records with the normalized kV slice as the prediction."""
    return [
        metrics.slice_record(
            p.kv,
            p.mv,
            p.body_mask,
            patient_id=p.patient_id,
            slice_index=p.slice_index,
            is_artifact=p.is_artifact,
            dataset_tag=dataset_tag,
            split=split,
            loss_spec_id=IDENTITY_ID,
        )
        for p in pairs
    ]


def run_cell(plan: ExperimentPlan, loss_spec: LossSpec, dataset_tag: str, datasets: dict):
    """Train and evaluate one grid cell; returns (run_dir, records)."""
    name = run_name(loss_spec, dataset_tag)
    run_dir = os.path.join(plan.output_dir, "runs", name)
    os.makedirs(run_dir, exist_ok=True)

    tc = replace(plan.train_config, loss=loss_spec, dataset=dataset_tag)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(
            {"model": plan.model_config.to_dict(), "train": tc.to_dict(), "run": name},
            f,
            indent=1,
            sort_keys=True,
        )

    sets = datasets[dataset_tag]
    trainer.train(
        plan.model_config,
        tc,
        {"train": sets["train"], "validation": sets["validation"]},
        out_dir=run_dir,
    )
    net = trainer.load_model_from_checkpoint(
        os.path.join(run_dir, "checkpoints", "best.ckpt"), expected_config=plan.model_config
    )
    records = evaluate_model(net, sets["test"], dataset_tag, loss_spec.loss_id)
    metrics.write_records(records, os.path.join(run_dir, "records.json"))
    metrics.write_report_csv(metrics.aggregate(records), os.path.join(run_dir, "metrics.csv"))
    return run_dir, records


def collect_records(output_dir):
    """All per-slice records under output_dir/runs, without retraining."""
    runs_dir = os.path.join(output_dir, "runs")
    records = []
    for name in sorted(os.listdir(runs_dir)):
        path = os.path.join(runs_dir, name, "records.json")
        if os.path.exists(path):
            records.extend(metrics.read_records(path))
    return records


def write_report(output_dir, extra_records=(), footer=None):
    """Aggregate every run's records into report.csv; returns the rows."""
    records = collect_records(output_dir) + list(extra_records)
    rows = metrics.aggregate(records)
    metrics.write_report_csv(rows, os.path.join(output_dir, "report.csv"))
    if footer:
        with open(os.path.join(output_dir, "report_footer.txt"), "w") as f:
            f.write(footer + "\n")
    return rows


def _save_figure(fig, out_dir, stem):
    for ext in ("svg", "png"):
        fig.savefig(os.path.join(out_dir, f"{stem}.{ext}"), bbox_inches="tight", dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# weight ablation
# ---------------------------------------------------------------------------


def run_weight_ablation(plan: ExperimentPlan, datasets: dict):
    """One L1w-only model per w in {1, 25, 50, 100}, trained on D_All.

    The chart shows artifact-slice means as bars and whole-set means as dots.
    """
    rows = []
    for w in WEIGHT_GRID:
        spec = LossSpec(terms=("l1w",), w=float(w))
        _, records = run_cell(plan, spec, "D_All", datasets)
        agg = metrics.aggregate(records)[0]
        agg["w"] = w
        rows.append(agg)

    csv_path = os.path.join(plan.output_dir, "weight_ablation.csv")
    metrics.write_report_csv(rows, csv_path, columns=["w"] + metrics.REPORT_COLUMNS)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6))
    xs = np.arange(len(WEIGHT_GRID))
    for ax, metric_name, label in (
        (axes[0], "psnr", "PSNR (dB)"),
        (axes[1], "ssim", "SSIM"),
    ):
        bars = [r[f"{metric_name}_art"] for r in rows]
        dots = [r[f"{metric_name}_all"] for r in rows]
        ax.bar(xs, bars, width=0.6, color="#7aa6c2", label="artifact slices (mean)")
        ax.plot(xs, dots, "o", color="#d1495b", label="all slices (mean)")
        ax.set_xticks(xs, [str(w) for w in WEIGHT_GRID])
        ax.set_xlabel("in-body weight w")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
    fig.suptitle("Weighted-L1 ablation (trained on D_All)")
    _save_figure(fig, plan.output_dir, "weight_ablation")
    return rows


# ---------------------------------------------------------------------------
# frequency-loss grid
# ---------------------------------------------------------------------------


def run_ffl_grid(plan: ExperimentPlan, datasets: dict):
    """3x3 grid over (alpha, beta), frequency loss only, trained on D_All.

    Heatmap cells are the mean of the artifact-set and whole-set test means.
    A monotonicity flag records whether increasing alpha lowered mean PSNR
    (observed, not asserted; the phantom cohort may behave differently).
    """
    psnr_grid = np.zeros((len(FFL_GRID), len(FFL_GRID)))
    ssim_grid = np.zeros_like(psnr_grid)
    rows = []
    for i, beta in enumerate(FFL_GRID):  # rows: beta
        for j, alpha in enumerate(FFL_GRID):  # cols: alpha
            spec = LossSpec(terms=("ffl",), alpha=alpha, beta=beta)
            _, records = run_cell(plan, spec, "D_All", datasets)
            agg = metrics.aggregate(records)[0]
            psnr_grid[i, j] = np.mean([agg["psnr_art"], agg["psnr_all"]])
            ssim_grid[i, j] = np.mean([agg["ssim_art"], agg["ssim_all"]])
            agg.update({"alpha": alpha, "beta": beta})
            rows.append(agg)

    metrics.write_report_csv(
        rows,
        os.path.join(plan.output_dir, "ffl_grid.csv"),
        columns=["alpha", "beta"] + metrics.REPORT_COLUMNS,
    )

    mean_psnr_by_alpha = psnr_grid.mean(axis=0)
    summary = {
        "alpha_values": list(FFL_GRID),
        "beta_values": list(FFL_GRID),
        "psnr_cells": psnr_grid.tolist(),
        "ssim_cells": ssim_grid.tolist(),
        "mean_psnr_by_alpha": mean_psnr_by_alpha.tolist(),
        "psnr_decreases_with_alpha": bool(np.all(np.diff(mean_psnr_by_alpha) < 0)),
    }
    with open(os.path.join(plan.output_dir, "ffl_grid_summary.json"), "w") as f:
        json.dump(summary, f, indent=1)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.8))
    for ax, grid, title in ((axes[0], psnr_grid, "PSNR (dB)"), (axes[1], ssim_grid, "SSIM")):
        im = ax.imshow(grid, cmap="viridis")
        ax.set_xticks(range(len(FFL_GRID)), [f"{a:g}" for a in FFL_GRID])
        ax.set_yticks(range(len(FFL_GRID)), [f"{b:g}" for b in FFL_GRID])
        ax.set_xlabel("alpha")
        ax.set_ylabel("beta")
        ax.set_title(title)
        for i in range(len(FFL_GRID)):
            for j in range(len(FFL_GRID)):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=7)
        fig.colorbar(im, ax=ax)
    fig.suptitle("Frequency-loss parameter grid (mean of artifact-set and whole-set test means)")
    _save_figure(fig, plan.output_dir, "ffl_grid")
    return summary


# ---------------------------------------------------------------------------
# loss matrix
# ---------------------------------------------------------------------------


def _matrix_spec(terms) -> LossSpec:
    return LossSpec(terms=terms, w=100.0, alpha=0.5, beta=1.0)


def run_loss_matrix(plan: ExperimentPlan, datasets: dict):
    """Seven loss combinations, each trained on D_Art and on D_All (14 runs).

    D_All rows report the artifact-subset mean with the whole-set mean in
    parentheses; an identity-baseline row (prediction = normalized kVCT)
    contextualizes the gains.  Best-per-column metadata breaks ties by PSNR
    then SSIM.
    """
    all_rows = []
    for terms in LOSS_MATRIX:
        for tag in ("D_Art", "D_All"):
            spec = _matrix_spec(terms)
            _, records = run_cell(plan, spec, tag, datasets)
            agg = metrics.aggregate(records)[0]
            all_rows.append(agg)

    baseline = identity_records(datasets["D_All"]["test"], "D_All")
    base_row = metrics.aggregate(baseline)[0]
    all_rows.append(base_row)
    metrics.write_records(baseline, os.path.join(plan.output_dir, "identity_records.json"))

    metrics.write_report_csv(all_rows, os.path.join(plan.output_dir, "loss_matrix.csv"))

    # formatted table: artifact value with the whole-set mean in parentheses
    formatted = []
    for r in all_rows:
        fmt = {"loss_spec_id": r["loss_spec_id"], "dataset_tag": r["dataset_tag"]}
        for m in ("psnr", "ssim"):
            art, whole = r[f"{m}_art"], r[f"{m}_all"]
            if r["dataset_tag"] == "D_All":
                fmt[m] = f"{art:.2f} ({whole:.2f})" if art is not None else f"({whole:.2f})"
            else:
                fmt[m] = f"{art:.2f}" if art is not None else ""
        formatted.append(fmt)
    metrics.write_report_csv(
        formatted,
        os.path.join(plan.output_dir, "loss_matrix_table.csv"),
        columns=["loss_spec_id", "dataset_tag", "psnr", "ssim"],
    )

    def best(column, rows):
        scored = [r for r in rows if r.get(column) is not None]
        if not scored:
            return None
        # ties broken by PSNR, then SSIM
        key = lambda r: (  # noqa: E731
            r[column],
            r.get("psnr_art") or -np.inf,
            r.get("ssim_art") or -np.inf,
        )
        top = max(scored, key=key)
        return {"loss_spec_id": top["loss_spec_id"], "dataset_tag": top["dataset_tag"]}

    trained = [r for r in all_rows if r["loss_spec_id"] != IDENTITY_ID]
    meta = {
        "best_per_column": {
            col: best(col, trained) for col in ("psnr_art", "ssim_art", "psnr_all", "ssim_all")
        },
        "tie_break_rule": "ties broken by PSNR, then SSIM",
        "n_runs": len(trained),
    }
    with open(os.path.join(plan.output_dir, "loss_matrix_meta.json"), "w") as f:
        json.dump(meta, f, indent=1)
    return all_rows


# ---------------------------------------------------------------------------
# qualitative panel
# ---------------------------------------------------------------------------


def _cell_stats(img):
    return {
        "min": float(np.min(img)),
        "max": float(np.max(img)),
        "mean": float(np.mean(img)),
        "std": float(np.std(img)),
    }


def render_reconstruction_panel(run_dirs, pair, out_path):
    """Grid image: row 1 shows the kV input and MV ground truth, then one
    prediction row per run directory.  All panels share the [-1, 1] window.

    Missing checkpoints produce a row marked "missing" instead of failing.
    Per-cell pixel statistics land next to the image for regression checks.
    """
    n_rows = 1 + len(run_dirs)
    fig, axes = plt.subplots(n_rows, 2, figsize=(6, 3 * n_rows), squeeze=False)
    stats = {}

    for ax, img, label in (
        (axes[0][0], pair.kv, "kVCT (input)"),
        (axes[0][1], pair.mv, "MVCT (ground truth)"),
    ):
        ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
        ax.set_title(label, fontsize=8)
        ax.axis("off")
        stats[label] = _cell_stats(img)

    for row, run_dir in enumerate(run_dirs, start=1):
        name = os.path.basename(os.path.normpath(run_dir))
        ckpt = os.path.join(run_dir, "checkpoints", "best.ckpt")
        axes[row][1].axis("off")
        if not os.path.exists(ckpt):
            axes[row][0].text(0.5, 0.5, "missing", ha="center", va="center")
            axes[row][0].set_title(name, fontsize=8)
            axes[row][0].axis("off")
            stats[name] = "missing"
            continue
        net = trainer.load_model_from_checkpoint(ckpt)
        pred = trainer.predict_pairs(net, [pair])[0]
        axes[row][0].imshow(pred, cmap="gray", vmin=-1, vmax=1)
        axes[row][0].set_title(name, fontsize=8)
        axes[row][0].axis("off")
        stats[name] = _cell_stats(pred)

    fig.savefig(out_path, bbox_inches="tight", dpi=150)
    plt.close(fig)
    stats_path = os.path.splitext(out_path)[0] + "_stats.json"
    with open(stats_path, "w") as f:
        json.dump(stats, f, indent=1)
    return stats
