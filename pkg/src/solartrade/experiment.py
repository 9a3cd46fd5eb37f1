"""Full comparison pipeline and report emission.

``run_experiment`` loads or synthesises data, trains the short and long PPO
agents and the forecaster, evaluates all five agents on the test window and
collects everything into a :class:`ResultsTable`. ``emit_report`` writes the
CSVs (deterministic for a given config) and the plots.
"""

from __future__ import annotations

import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import PPOTrader, RandomPolicy, SellOnlyPolicy, evaluate
from .config import ExperimentConfig
from .data import Dataset, SynthParams, load_dataset, read_dataset_csv, split_chronological, synth_dataset
from .exceptions import SolarTradeError
from .forecast import BestDayTrader, train_moe

log = logging.getLogger(__name__)

AGENTS = ("MoE", "SellOnly", "Random", "PPO-30", "PPO-1000")

# Reference means per agent and forecaster losses as originally reported;
# shown beside the synthetic-data results, never compared against them.
REFERENCE_MEANS = {"MoE": 14.60367, "SellOnly": 14.5, "Random": 15.55, "PPO-30": 16.336, "PPO-1000": 21.61233}
REFERENCE_EMBEDDING = {
    ("table", 128, 2, 128): (7.3115, 9.6131),
    ("table", 128, 2, 64): (85.9594, 9.0421),
    ("table", 128, 4, 64): (96.0857, 8.3847),
    ("table", 128, 6, 64): (98.2492, 10.7752),
    ("soliton", 128, 6, 64): (115.0481, 8.1353),
}


class ExperimentError(SolarTradeError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


@dataclass
class ResultsTable:
    totals: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    embedding_rows: list = field(default_factory=list)
    forecast_audit: list = field(default_factory=list)
    leak_free: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0
    provenance: str = ""
    started: float = 0.0
    finished: float = 0.0
    stage_seconds: dict = field(default_factory=dict)

    @property
    def means(self) -> dict:
        return {name: float(np.mean(v)) for name, v in self.totals.items() if len(v)}


def load_data(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.source == "csv":
        return load_dataset(d.solar_csv, d.prices_csv)
    if d.source == "dataset":
        return read_dataset_csv(d.dataset_csv)
    params = SynthParams(d.price_base, d.price_amplitude, d.price_noise, d.price_phase,
                         d.gen_base, d.gen_amplitude, d.gen_noise, d.gen_phase)
    return synth_dataset(d.n_days, d.seed, params)


@contextmanager
def _stage(results: ResultsTable, name: str, out_dir):
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except Exception as exc:
        if out_dir is not None:
            _flush_partial(results, out_dir, name, exc)
        raise ExperimentError(name, exc) from exc
    results.stage_seconds[name] = time.perf_counter() - t0
    log.info("stage %s: done in %.1fs", name, results.stage_seconds[name])


def _flush_partial(results, out_dir, stage, exc):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"failed_stage": stage, "error": repr(exc), "totals": results.totals,
               "curves": {k: list(v) for k, v in results.curves.items()},
               "embedding_rows": results.embedding_rows}
    (out / "partial_results.json").write_text(json.dumps(payload, indent=2, default=float), encoding="utf-8")


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ResultsTable:
    cfg.validate()
    seed = cfg.run.seed
    results = ResultsTable(config_hash=cfg.hash(), seed=seed, started=time.time())

    with _stage(results, "data", out_dir):
        dataset = load_data(cfg)
        results.provenance = dataset.provenance
        train, test = split_chronological(dataset, cfg.split.test_fraction)
        if len(train) == 0:
            raise ValueError("chronological split left no training days")

    traders = {}
    for label, epochs in (("PPO-30", cfg.ppo.short_epochs), ("PPO-1000", cfg.ppo.long_epochs)):
        with _stage(results, f"train {label}", out_dir):
            trader = PPOTrader(**cfg.ppo.trader_params(epochs, seed)).fit(train)
            traders[label] = trader
            results.curves[label] = list(trader.training_curve_)

    forecast = None
    with _stage(results, "forecaster", out_dir):
        moe_params = cfg.moe.model_params()
        for row in cfg.moe.compare_rows():
            params = dict(moe_params, **row)
            res = train_moe(dataset, cfg.split.moe_test_fraction, seed, "random", **params)
            ref = REFERENCE_EMBEDDING.get((row["embedding"], row["dim"], row["n_experts"], row["expert_hidden"]))
            results.embedding_rows.append(_embedding_row(params, "random", res, ref))
            if all(params[k] == moe_params[k] for k in row):
                forecast = res
        if forecast is None:
            forecast = train_moe(dataset, cfg.split.moe_test_fraction, seed, "random", **moe_params)
            results.embedding_rows.append(_embedding_row(moe_params, "random", forecast, None))
        results.forecast_audit = list(zip(forecast.test_days.tolist(), forecast.test_actual.tolist(),
                                           forecast.test_predicted.tolist()))

    with _stage(results, "evaluate", out_dir):
        env = traders["PPO-1000"].make_env(test)
        ep = cfg.episodes
        results.totals["MoE"] = evaluate(BestDayTrader(forecast.model), env, ep.moe, seed).totals
        results.totals["SellOnly"] = evaluate(SellOnlyPolicy(), env, ep.sell_only, seed).totals
        results.totals["Random"] = evaluate(RandomPolicy(), env, ep.random, seed).totals
        for label, trader in traders.items():
            results.totals[label] = evaluate(trader, trader.make_env(test), ep.ppo, seed).totals

    if cfg.moe.leak_free_variant:
        with _stage(results, "forecaster (chronological split)", out_dir):
            res = train_moe(dataset, cfg.split.test_fraction, seed, "chronological", **moe_params)
            results.embedding_rows.append(_embedding_row(moe_params, "chronological", res, None))
            totals = evaluate(BestDayTrader(res.model), env, ep.moe, seed).totals
            results.leak_free = {"totals": totals, "test_rmse": res.test_rmse}

    results.finished = time.time()
    return results


def _embedding_row(params, split, res, ref):
    return {
        "embedding": params["embedding"], "dim": params["dim"], "experts": params["n_experts"],
        "top_k": params["top_k"], "expert_hidden": params["expert_hidden"], "split": split,
        "train_mse": res.train_mse, "train_mse_augmented": res.train_mse_augmented,
        "test_rmse": res.test_rmse,
        # overfitting gap: held-out error minus in-sample error, both in price units
        "generalization_gap": res.test_rmse - float(np.sqrt(res.train_mse)),
        "reference_train_mse": ref[0] if ref else None,
        "reference_test_rmse": ref[1] if ref else None,
    }


# ------------------------------------------------------------------ report

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, meta: dict, header, rows):
    lines = [f"# {k}={v}" for k, v in meta.items()]
    lines.append(",".join(header))
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_report(results: ResultsTable, out_dir, plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    meta = {"config_hash": results.config_hash, "seed": results.seed, "dataset": results.provenance}
    written = []

    agents = [a for a in AGENTS if a in results.totals]
    n_rows = max((len(results.totals[a]) for a in agents), default=0)
    rows = [[i] + [results.totals[a][i] if i < len(results.totals[a]) else None for a in agents]
            for i in range(n_rows)]
    _write_csv(out / "table1.csv", meta, ["episode"] + agents, rows)
    means = results.means
    _write_csv(out / "table3.csv", meta, ["agent", "mean_total", "episodes", "reference_mean"],
               [[a, means[a], len(results.totals[a]), REFERENCE_MEANS.get(a)] for a in agents])
    for label, name in (("PPO-1000", "training_curve.csv"), ("PPO-30", "training_curve_short.csv")):
        if label in results.curves:
            _write_csv(out / name, dict(meta, agent=label), ["epoch", "mean_total"],
                       [[i + 1, v] for i, v in enumerate(results.curves[label])])
    keys = ["embedding", "dim", "experts", "top_k", "expert_hidden", "split", "train_mse",
            "train_mse_augmented", "test_rmse", "generalization_gap", "reference_train_mse", "reference_test_rmse"]
    _write_csv(out / "embedding_compare.csv", meta, keys, [[r[k] for k in keys] for r in results.embedding_rows])
    _write_csv(out / "forecast.csv", meta, ["day", "actual_price", "predicted_price"], results.forecast_audit)
    written += [out / n for n in ("table1.csv", "table3.csv", "training_curve.csv",
                                  "embedding_compare.csv", "forecast.csv")]
    if results.leak_free:
        _write_csv(out / "moe_leakfree.csv", dict(meta, forecaster_split="chronological",
                                                  test_rmse=repr(results.leak_free["test_rmse"])),
                   ["episode", "total"], list(enumerate(results.leak_free["totals"])))
        written.append(out / "moe_leakfree.csv")

    run_info = {"config_hash": results.config_hash, "seed": results.seed, "dataset": results.provenance,
                "started": results.started, "finished": results.finished,
                "stage_seconds": results.stage_seconds, "python": platform.python_version(),
                "numpy": np.__version__}
    (out / "run.json").write_text(json.dumps(run_info, indent=2), encoding="utf-8")
    if plots:
        written += render_plots(results, out)
    return written


def render_plots(results: ResultsTable, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    means = results.means
    agents = [a for a in AGENTS if a in means]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(agents, [means[a] for a in agents], color="tab:blue")
    ax.set_ylabel("mean episode total")
    ax.set_title("Agent performance (test window)")
    fig.tight_layout()
    paths.append(out / "fig1_agent_means.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)

    if "PPO-1000" in results.curves and results.curves["PPO-1000"]:
        curve = np.asarray(results.curves["PPO-1000"])
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(np.arange(1, len(curve) + 1), curve, lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training episode total")
        ax.set_title("PPO training curve")
        fig.tight_layout()
        paths.append(out / "fig2_training_curve.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)

    rows = [r for r in results.embedding_rows if r["split"] == "random"]
    if rows:
        table_rows = [r for r in rows if r["embedding"] == "table"]
        if table_rows:
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.bar([f"{r['experts']}E/h{r['expert_hidden']}" for r in table_rows],
                   [r["train_mse"] for r in table_rows], color="tab:blue")
            ax.set_ylabel("train MSE")
            ax.set_title("Table embedding: training MSE by experts")
            fig.tight_layout()
            paths.append(out / "fig3_table_train_mse.png")
            fig.savefig(paths[-1], dpi=100)
            plt.close(fig)
        labels = [f"{r['embedding']} {r['experts']}E/h{r['expert_hidden']}" for r in rows]
        x = np.arange(len(rows))
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar(x - 0.2, [r["train_mse"] for r in rows], 0.4, label="train MSE", color="tab:blue")
        ax.bar(x + 0.2, [r["test_rmse"] for r in rows], 0.4, label="test RMSE", color="tab:orange")
        ax.set_xticks(x, labels, rotation=20, ha="right")
        ax.legend()
        ax.set_title("Embedding comparison")
        fig.tight_layout()
        paths.append(out / "fig4_embedding_losses.png")
        fig.savefig(paths[-1], dpi=100)
        plt.close(fig)
    return paths
