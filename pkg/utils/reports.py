import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from logger import setup_logger  # noqa: E402
from utils.harness import STEP_COLUMNS, robustness_table, switch_rate_report, travel_time_differences  # noqa: E402

logger = setup_logger("reports")

SUM_SCALE = 100.0
SUM_COLUMNS = ("sum_delay", "sum_queue", "sum_travel_time")
MATRIX_HEADER = ["scale", "demand", "method", "mean_delay", "normalized"]
RL_PLOT_ORDER = ("rglight", "dgrl", "igrl", "irl")


def summary_frame(records, paper_scale=False):
    df = pd.DataFrame([r.summary() for r in records]).sort_values(["scenario", "method"]).reset_index(drop=True)
    if paper_scale:
        for col in SUM_COLUMNS:
            for stat in ("mean", "std"):
                df[f"{col}_{stat}"] = df[f"{col}_{stat}"] / SUM_SCALE
    return df


def per_seed_frame(records):
    frames = []
    for rec in records:
        df = rec.rows.copy()
        df.insert(0, "method", rec.method)
        df.insert(0, "scenario", rec.scenario.key)
        frames.append(df)
    return pd.concat(frames, ignore_index=True).sort_values(["scenario", "method", "seed"]).reset_index(drop=True)


def steps_frame(record):
    """Per-step metrics of every seed of one record, one row per (seed, step)."""
    frames = [df.assign(seed=seed) for seed, df in sorted(record.steps.items())]
    if not frames:
        return pd.DataFrame(columns=["seed", *STEP_COLUMNS])
    return pd.concat(frames, ignore_index=True)[["seed", *STEP_COLUMNS]]


def plot_delay_evolution(records, outpath, title):
    plt.figure(figsize=(8, 5))
    for rec in sorted(records, key=lambda r: r.method):
        curve = rec.delay_curves.mean(axis=0)
        plt.plot(np.arange(len(curve)), curve, linewidth=1, label=rec.method)
    surge = records[0].scenario.surge_start
    if surge is not None:
        plt.axvline(surge, color="grey", linestyle=":", label="surge")
    plt.xlabel("Time step (s)")
    plt.ylabel("Average delay")
    plt.title(title)
    plt.legend()
    plt.grid(True, linestyle='--', alpha=0.6)
    plt.tight_layout()
    plt.savefig(outpath, dpi=150)
    plt.close()


def plot_matrix_heatmaps(matrix, value_column, outpath, title):
    methods = sorted(matrix["method"].unique())
    fig, axes = plt.subplots(1, len(methods), figsize=(3.2 * len(methods), 3.4), squeeze=False)
    for ax, method in zip(axes[0], methods):
        grid = matrix[matrix["method"] == method].pivot(index="scale", columns="demand", values=value_column)
        im = ax.imshow(grid.to_numpy(), cmap="viridis", vmin=0, vmax=10_000, origin="lower")
        ax.set_xticks(range(len(grid.columns)), [f"{d:g}" for d in grid.columns])
        ax.set_yticks(range(len(grid.index)), [str(s) for s in grid.index])
        ax.set_xlabel("demand")
        ax.set_ylabel("scale")
        ax.set_title(method)
        for (i, j), value in np.ndenumerate(grid.to_numpy()):
            ax.text(j, i, f"{value:.0f}", ha="center", va="center", fontsize=7, color="white")
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8)
    fig.suptitle(title)
    fig.savefig(outpath, dpi=150)
    plt.close(fig)


def plot_travel_time_histogram(diffs, outpath, title):
    plt.figure(figsize=(6, 4))
    plt.hist(diffs["difference"], bins=40, color="C0", alpha=0.8)
    plt.axvline(0.0, color="black", linewidth=1)
    plt.xlabel("Travel time difference (s)")
    plt.ylabel("Vehicles")
    plt.title(title)
    plt.grid(True, linestyle='--', alpha=0.6)
    plt.tight_layout()
    plt.savefig(outpath, dpi=150)
    plt.close()


def _rl_pair(records):
    present = [m for m in RL_PLOT_ORDER if any(r.method == m for r in records)]
    return present[:2] if len(present) >= 2 else None


def emit_reports(records, out_dir, matrix=None, paper_scale=False, plots=True):
    """Write summary/per-seed/switch-rate/per-step CSVs, an XLSX workbook and static plots; returns written paths."""
    if not records:
        raise ValueError("No evaluation records to report")
    written = []
    try:
        os.makedirs(out_dir, exist_ok=True)
        summary = summary_frame(records, paper_scale)
        per_seed = per_seed_frame(records)
        switches = switch_rate_report(records).sort_values(["scenario", "method"]).reset_index(drop=True)

        tables = {"summary": summary, "per_seed": per_seed, "switch_rates": switches}
        if len({r.scenario.missing_probability for r in records}) > 1:
            robust = robustness_table(records)
            robust.columns = [f"{metric}_p{p:g}" for metric, p in robust.columns]
            tables["robustness"] = robust.reset_index()
        if matrix is not None and len(matrix):
            extra = [c for c in matrix.columns if c not in MATRIX_HEADER]
            tables["matrix"] = matrix[MATRIX_HEADER + extra].sort_values(["scale", "demand", "method"])

        for name, df in tables.items():
            path = os.path.join(out_dir, f"{name}.csv")
            df.to_csv(path, index=False)
            written.append(path)
        for scenario_key, df in per_seed.groupby("scenario", sort=True):
            path = os.path.join(out_dir, f"scenario_{scenario_key}.csv")
            df.to_csv(path, index=False)
            written.append(path)
        for rec in records:
            if not rec.steps:
                continue
            path = os.path.join(out_dir, f"steps_{rec.scenario.key}_{rec.method}.csv")
            steps_frame(rec).to_csv(path, index=False)
            written.append(path)

        xlsx_path = os.path.join(out_dir, "results.xlsx")
        with pd.ExcelWriter(xlsx_path, engine='openpyxl') as writer:
            for name, df in tables.items():
                df.to_excel(writer, index=False, sheet_name=name[:31])
        written.append(xlsx_path)

        if plots:
            written.extend(_emit_plots(records, matrix, out_dir))
        logger.info(f"Wrote {len(written)} report file(s) to: {out_dir}")
        return written
    except Exception as e:
        logger.error(f"Failed to write reports: {e}")
        raise


def _emit_plots(records, matrix, out_dir):
    written = []
    by_scenario = {}
    for rec in records:
        by_scenario.setdefault(rec.scenario.key, []).append(rec)
    for key, recs in sorted(by_scenario.items()):
        path = os.path.join(out_dir, f"delay_evolution_{key}.png")
        plot_delay_evolution(recs, path, f"Average delay evolution ({key})")
        written.append(path)
        pair = _rl_pair(recs)
        if pair:
            a = next(r for r in recs if r.method == pair[0])
            b = next(r for r in recs if r.method == pair[1])
            diffs = travel_time_differences(a, b)
            if len(diffs):
                path = os.path.join(out_dir, f"travel_time_diff_{key}_{pair[0]}_vs_{pair[1]}.png")
                plot_travel_time_histogram(diffs, path, f"{pair[0]} - {pair[1]} travel time ({key})")
                written.append(path)
    if matrix is not None and len(matrix):
        path = os.path.join(out_dir, "matrix_delay_heatmap.png")
        plot_matrix_heatmaps(matrix, "normalized", path, "Normalized delay")
        written.append(path)
        if "switch_rate_x1000" in matrix.columns:
            path = os.path.join(out_dir, "matrix_switch_rate_heatmap.png")
            plot_matrix_heatmaps(matrix, "switch_rate_normalized", path, "Normalized switch rate")
            written.append(path)
    return written
