"""Episodic evaluation, paired baselines, and ablation sweeps.

Every comparison shares its task stream: the per-task episode seeds are a
pure function of the evaluation seed and task index, so the refined
classifier, the vanilla baseline, and every ablation value see byte-identical
episodes. Reports carry the per-task accuracies, their mean, and the normal
95% confidence interval 1.96 * stddev / sqrt(n).

Meta-test never touches the adaptation (overfit) machinery and never reads
query labels until predictions are fixed; `score_task` is the single place
where labels meet predictions.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EmbeddingDataset, Episode, sample_episode
from .denoiser import COND_LEARNED, EpisodeDenoiser
from .diffusion import SamplerConfig, sample_prototypes
from .numerics import RngStream
from .protonet import Metric, classify, vanilla_prototypes
from .training import TrainConfig, TrainState, meta_train

ABLATION_AXES = (
    "T", "ddim_stride", "mc_samples", "cond_mode", "residual", "metric", "beta", "denoiser_size",
)
INFERENCE_ONLY_AXES = ("ddim_stride", "mc_samples")


@dataclass
class EvalReport:
    n_tasks: int
    per_task_accuracy: list
    mean: float
    ci95: float
    config: dict = field(default_factory=dict)
    ms_per_task: float = 0.0

    @classmethod
    def from_accuracies(cls, accuracies, config=None, ms_per_task: float = 0.0) -> "EvalReport":
        accs = [float(a) for a in accuracies]
        arr = np.asarray(accs, dtype=np.float64)
        if accs and len(set(accs)) == 1:  # exact zero-variance case
            mean, ci95 = accs[0], 0.0
        else:
            mean = float(arr.mean()) if accs else 0.0
            ci95 = float(1.96 * arr.std(ddof=1) / np.sqrt(len(accs))) if len(accs) > 1 else 0.0
        return cls(
            n_tasks=len(accs),
            per_task_accuracy=accs,
            mean=mean,
            ci95=ci95,
            config=dict(config or {}),
            ms_per_task=float(ms_per_task),
        )

    def verify_consistent(self) -> None:
        """Mean and interval must be recomputable from the per-task list."""
        ref = EvalReport.from_accuracies(self.per_task_accuracy)
        if abs(ref.mean - self.mean) > 1e-12 or abs(ref.ci95 - self.ci95) > 1e-12:
            raise ValueError("report summary does not match its per-task accuracies")


def task_seed_for(eval_seed: int, task_index: int) -> int:
    """Shared task stream: one episode seed per (evaluation seed, index)."""
    return int(RngStream(eval_seed).child("eval-task", task_index).raw(1)[0])


def score_task(episode: Episode, predict) -> float:
    """Run the predictor on the query set, then compare against labels.

    ``predict`` receives only the flattened query matrix; ``query_labels``
    is read strictly after the predictions are fixed.
    """
    n, q, d = episode.query.shape
    predictions = np.asarray(predict(episode.query.reshape(n * q, d)))
    labels = episode.query_labels
    return float((predictions == labels).mean())


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()[:12]


def _eval_stream(dataset, n_way, k_shot, q_query, n_tasks, seed):
    for i in range(n_tasks):
        yield sample_episode(dataset, n_way, k_shot, q_query, task_seed_for(seed, i))


def meta_test(state: TrainState, dataset: EmbeddingDataset, n_way: int, k_shot: int, q_query: int,
              n_tasks: int, sampler: SamplerConfig, seed: int, noise_seed: int | None = None,
              metric: Metric | None = None) -> EvalReport:
    """Evaluate the diffusion-refined classifier over seeded tasks.

    ``noise_seed`` controls only the sampling chains; leaving it None ties it
    to ``seed``. The task stream itself depends on ``seed`` alone, so paired
    comparisons stay paired while the sampling noise is varied.
    """
    cfg = state.config
    metric = metric or cfg.metric()
    noise_root = RngStream(seed if noise_seed is None else noise_seed)
    accs = []
    elapsed = 0.0
    for episode in _eval_stream(dataset, n_way, k_shot, q_query, n_tasks, seed):
        start = time.perf_counter()
        vanilla = vanilla_prototypes(episode)
        class_ids = episode.class_ids if cfg.cond_mode == COND_LEARNED else None
        denoiser = EpisodeDenoiser(state.model, class_ids)
        chain_rng = noise_root.child("sample", episode.episode_seed)
        protos, _ = sample_prototypes(
            denoiser, vanilla, state.schedule, sampler, chain_rng, residual=cfg.residual
        )
        accs.append(score_task(episode, lambda q: classify(q, protos, metric).argmax(axis=1)))
        elapsed += time.perf_counter() - start
    snapshot = {
        "kind": "diffusion",
        "n_way": n_way, "k_shot": k_shot, "q_query": q_query,
        "n_tasks": n_tasks, "seed": seed,
        "sampler_mode": sampler.mode, "stride": sampler.stride,
        "mc_samples": sampler.mc_samples, "aggregate": sampler.aggregate,
        "metric": metric.variant, "temperature": metric.temperature,
        "residual": cfg.residual, "cond_mode": cfg.cond_mode,
        "timesteps": cfg.timesteps, "train_seed": cfg.seed,
        "train_episodes": state.episodes_done,
    }
    return EvalReport.from_accuracies(accs, snapshot, 1000.0 * elapsed / max(n_tasks, 1))


def run_baseline(dataset: EmbeddingDataset, n_way: int, k_shot: int, q_query: int,
                 n_tasks: int, metric: Metric | None = None, seed: int = 0) -> EvalReport:
    """Vanilla prototype classifier over the same seeded task stream."""
    metric = metric or Metric()
    accs = []
    elapsed = 0.0
    for episode in _eval_stream(dataset, n_way, k_shot, q_query, n_tasks, seed):
        start = time.perf_counter()
        protos = vanilla_prototypes(episode)
        accs.append(score_task(episode, lambda q: classify(q, protos, metric).argmax(axis=1)))
        elapsed += time.perf_counter() - start
    snapshot = {
        "kind": "baseline",
        "n_way": n_way, "k_shot": k_shot, "q_query": q_query,
        "n_tasks": n_tasks, "seed": seed,
        "metric": metric.variant, "temperature": metric.temperature,
    }
    return EvalReport.from_accuracies(accs, snapshot, 1000.0 * elapsed / max(n_tasks, 1))


@dataclass
class AblationSpec:
    axis: str
    values: list
    base: TrainConfig

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}; choose from {ABLATION_AXES}")
        if not self.values:
            raise ValueError("ablation values must be nonempty")


def _config_for_value(base: TrainConfig, axis: str, value) -> TrainConfig:
    import copy

    cfg = copy.deepcopy(base)
    if axis == "T":
        cfg.timesteps = int(value)
    elif axis == "cond_mode":
        cfg.cond_mode = str(value)
        cfg.__post_init__()
    elif axis == "residual":
        cfg.residual = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "on", "yes")
    elif axis == "metric":
        cfg.metric_variant = str(value)
    elif axis == "beta":
        cfg.loss_weight = float(value)
    elif axis == "denoiser_size":
        layers, dim, heads, mlp = (int(p) for p in str(value).split("x"))
        cfg.denoiser_layers, cfg.denoiser_dim = layers, dim
        cfg.denoiser_heads, cfg.denoiser_mlp = heads, mlp
    return cfg


def _sampler_for_value(base: SamplerConfig, axis: str, value) -> SamplerConfig:
    kwargs = dict(mode=base.mode, stride=base.stride, mc_samples=base.mc_samples, aggregate=base.aggregate)
    if axis == "ddim_stride":
        kwargs["stride"] = int(value)
    elif axis == "mc_samples":
        kwargs["mc_samples"] = int(value)
    return SamplerConfig(**kwargs)


def run_ablation(spec: AblationSpec, train_dataset: EmbeddingDataset, test_dataset: EmbeddingDataset,
                 n_tasks: int = 600, seed: int = 0, sampler: SamplerConfig | None = None,
                 report_dir=None, log=None) -> list:
    """Train/evaluate one report row per axis value, on paired task streams.

    Inference-only axes (ddim_stride, mc_samples) train a single shared
    checkpoint and re-evaluate it. Completed rows are flushed to
    ``report_dir`` after every value, so a failure keeps partial results.
    """
    sampler = sampler or SamplerConfig()
    rows: list = []
    shared_state = None

    def flush():
        if report_dir is not None:
            out = Path(report_dir)
            out.mkdir(parents=True, exist_ok=True)
            export_report(rows, out / f"ablation_{spec.axis}.csv", "csv")
            export_report(rows, out / f"ablation_{spec.axis}.json", "json")

    try:
        for value in spec.values:
            if spec.axis in INFERENCE_ONLY_AXES:
                if shared_state is None:
                    shared_state = meta_train(train_dataset, _config_for_value(spec.base, spec.axis, None))
                state = shared_state
            else:
                state = meta_train(train_dataset, _config_for_value(spec.base, spec.axis, value))
            cfg = state.config
            run_sampler = _sampler_for_value(sampler, spec.axis, value)
            if run_sampler.stride > cfg.timesteps:
                run_sampler = _sampler_for_value(run_sampler, "ddim_stride", cfg.timesteps)
            report = meta_test(
                state, test_dataset, cfg.n_way, cfg.k_shot, cfg.q_query,
                n_tasks, run_sampler, seed,
            )
            report.config["axis"] = spec.axis
            report.config["axis_value"] = str(value)
            rows.append((str(value), report))
            if log:
                log(f"{spec.axis}={value}: {report.mean:.4f} ± {report.ci95:.4f}")
            flush()
    except Exception:
        flush()
        raise
    return rows


def _rows_from(report_or_rows):
    if isinstance(report_or_rows, EvalReport):
        return [(report_or_rows.config.get("axis_value", ""), report_or_rows)]
    return list(report_or_rows)


CSV_COLUMNS = ("axis_value", "mean", "ci95", "n_tasks", "ms_per_task", "config_hash")


def export_report(report_or_rows, path, fmt: str = "csv") -> None:
    """Write a report (or ablation rows) as CSV or JSON with fixed columns."""
    rows = _rows_from(report_or_rows)
    for _, report in rows:
        report.verify_consistent()
    path = Path(path)
    if fmt == "csv":
        with path.open("w", encoding="ascii") as fh:
            fh.write(",".join(CSV_COLUMNS) + "\n")
            for value, report in rows:
                fh.write(
                    f"{value},{report.mean!r},{report.ci95!r},{report.n_tasks},"
                    f"{report.ms_per_task!r},{config_hash(report.config)}\n"
                )
    elif fmt == "json":
        payload = []
        for value, report in rows:
            payload.append({
                "axis_value": value,
                "mean": report.mean,
                "ci95": report.ci95,
                "n_tasks": report.n_tasks,
                "ms_per_task": report.ms_per_task,
                "config_hash": config_hash(report.config),
                "config": report.config,
                "per_task_accuracy": report.per_task_accuracy,
            })
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="ascii")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


# --- flat key=value config files -------------------------------------------

CONFIG_KEYS = {
    "n_way": int, "k_shot": int, "q_query": int,
    "loss_weight": float, "learning_rate": float, "momentum": float,
    "task_batch_size": int, "total_episodes": int, "seed": int,
    "timesteps": int, "residual": bool,
    "metric": str, "temperature": float,
    "overfit_learning_rate": float, "overfit_max_iters": int,
    "overfit_tolerance": float, "overfit_include_query": bool,
    "denoiser_layers": int, "denoiser_dim": int, "denoiser_heads": int,
    "denoiser_mlp": int, "cond_mode": str, "time_freqs": int, "max_ways": int,
    "data": str,
}

_BOOL_WORDS = {"1": True, "true": True, "on": True, "yes": True,
               "0": False, "false": False, "off": False, "no": False}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment."""
    mapping: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        mapping[key] = value
    return mapping


def load_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def coerce_config_values(mapping: dict) -> dict:
    out: dict = {}
    for key, value in mapping.items():
        if key not in CONFIG_KEYS:
            raise ValueError(f"unknown config key {key!r}")
        caster = CONFIG_KEYS[key]
        if caster is bool:
            if str(value).lower() not in _BOOL_WORDS:
                raise ValueError(f"config key {key!r}: not a boolean: {value!r}")
            out[key] = _BOOL_WORDS[str(value).lower()]
        else:
            out[key] = caster(value)
    return out


def train_config_from_mapping(mapping: dict) -> tuple:
    """(TrainConfig, extras) from coerced flat keys; extras holds e.g. data."""
    from .overfit import OverfitConfig

    values = coerce_config_values(mapping)
    extras = {}
    if "data" in values:
        extras["data"] = values.pop("data")
    overfit_kwargs = {}
    for flat, attr in (
        ("overfit_learning_rate", "learning_rate"),
        ("overfit_max_iters", "max_iters"),
        ("overfit_tolerance", "loss_tolerance"),
        ("overfit_include_query", "include_query"),
    ):
        if flat in values:
            overfit_kwargs[attr] = values.pop(flat)
    if "metric" in values:
        values["metric_variant"] = values.pop("metric")
    cfg = TrainConfig(overfit=OverfitConfig(**overfit_kwargs), **values)
    return cfg, extras
