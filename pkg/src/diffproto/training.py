"""Meta-training of the denoiser over a stream of few-shot episodes.

Per episode: compute vanilla prototypes, obtain the adapted (overfitted)
prototypes as the regression target, draw one timestep and one noise matrix,
and take one denoiser forward pass that serves both loss terms. The query
cross entropy is evaluated with the prototype implied by the prediction at
the sampled timestep, and the combined objective is the per-query average of
(CE + weighted reconstruction error):

    total = mean_q CE_q + loss_weight * mse(prediction, target)

The per-query mean keeps gradient magnitudes independent of the query count,
which the fixed episodic learning rate assumes. Updates are SGD with
momentum, averaging gradients over ``task_batch_size`` episodes. Everything
stochastic is a pure function of (seed, episode index), so training is
deterministic, and resuming from a checkpoint on a task-batch boundary
reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nm
from .data import Episode, EmbeddingDataset, sample_episode
from .denoiser import (
    COND_LEARNED,
    COND_NONE,
    COND_VANILLA,
    DenoiserConfig,
    DenoiserModel,
    load_arrays,
    save_arrays,
)
from .diffusion import NoiseSchedule, forward_diffuse, linear_schedule
from .numerics import RngStream, Tape, Tensor
from .overfit import OverfitCache, OverfitConfig, overfit_prototypes
from .protonet import Metric, PrototypeSet, prototype_logits, vanilla_prototypes

DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    """Loss exceeded the divergence limit; carries the history so far."""

    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


@dataclass
class TrainConfig:
    """Everything needed to reproduce a training run."""

    # episode geometry
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    # objective and optimizer
    loss_weight: float = 1.0
    learning_rate: float = 1e-3
    momentum: float = 0.9
    task_batch_size: int = 4
    total_episodes: int = 10_000
    seed: int = 0
    # diffusion
    timesteps: int = 100
    residual: bool = True
    # diffusion targets are standardized to roughly unit variance so the
    # N(0, I) chain start matches the forward marginal; 0 = calibrate from
    # probe episodes at training start
    signal_scale: float = 0.0
    # classifier metric
    metric_variant: str = "sqeuclidean"
    temperature: float = 10.0
    # inner loop
    overfit: OverfitConfig = field(default_factory=OverfitConfig)
    # denoiser architecture
    denoiser_layers: int = 2
    denoiser_dim: int = 64
    denoiser_heads: int = 4
    denoiser_mlp: int = 128
    cond_mode: str = COND_VANILLA
    time_freqs: int = 8
    max_ways: int = 0  # 0: use n_way

    def __post_init__(self):
        if self.loss_weight < 0:
            raise ValueError("loss_weight must be >= 0")
        if self.task_batch_size < 1:
            raise ValueError("task_batch_size must be >= 1")
        if self.cond_mode == COND_NONE and self.residual:
            # An unconditioned model carries no task information, so there is
            # no vanilla prototype to recombine with at test time; the
            # pipeline degrades to plain prototype generation.
            self.residual = False

    def metric(self) -> Metric:
        return Metric(self.metric_variant, self.temperature)

    def denoiser_config(self, proto_dim: int, n_classes: int = 0) -> DenoiserConfig:
        return DenoiserConfig(
            n_layers=self.denoiser_layers,
            d_model=self.denoiser_dim,
            n_heads=self.denoiser_heads,
            mlp_hidden=self.denoiser_mlp,
            cond_mode=self.cond_mode,
            proto_dim=proto_dim,
            max_ways=self.max_ways or self.n_way,
            timesteps=self.timesteps,
            time_freqs=self.time_freqs,
            n_classes=n_classes if self.cond_mode == COND_LEARNED else 0,
        )


@dataclass
class TrainState:
    model: DenoiserModel
    config: TrainConfig
    schedule: NoiseSchedule
    momentum_buffers: dict
    signal_scale: float = 1.0
    episodes_done: int = 0
    history_ce: list = field(default_factory=list)
    history_diff: list = field(default_factory=list)
    history_total: list = field(default_factory=list)
    cache: OverfitCache = field(default_factory=OverfitCache)

    def history_rows(self):
        return list(zip(self.history_ce, self.history_diff, self.history_total))


def episode_seed_for(run_seed: int, index: int) -> int:
    """Deterministic per-episode seed from the run seed and episode index."""
    return int(RngStream(run_seed).child("episode-seed", index).raw(1)[0])


def adapted_targets(episode: Episode, vanilla: PrototypeSet, cfg: TrainConfig,
                    cache: OverfitCache | None = None) -> np.ndarray:
    """Overfitted prototypes for the episode, memoized by episode seed."""
    if cache is not None:
        hit = cache.get(episode.episode_seed, episode.n_way)
        if hit is not None:
            return hit
    result = overfit_prototypes(episode, vanilla, cfg.overfit, cfg.metric())
    protos = result.prototypes.vectors
    if cache is not None:
        cache.put(episode.episode_seed, protos)
    return protos


def diffusion_loss(target: np.ndarray, vanilla: np.ndarray, t: int, eps: np.ndarray,
                   model: DenoiserModel, sched: NoiseSchedule, class_ids=None) -> Tensor:
    """Mean squared error of the signal prediction at one noised timestep."""
    noised = forward_diffuse(target, t, eps, sched)
    pred = model.forward(noised, vanilla, t, class_ids)
    diff = nm.sub(pred, Tensor(np.asarray(target, dtype=pred.dtype.type)))
    return nm.tmean(nm.mul(diff, diff))


def episode_loss(episode: Episode, state: TrainState, rng: RngStream):
    """Combined objective for one episode.

    The denoiser operates in standardized signal space (target divided by
    the state's signal scale); predictions are scaled back before the
    classification term so the query cross entropy sees real prototypes.
    Returns (total, ce_part, diff_part) as Tensors.
    """
    cfg = state.config
    model = state.model
    sched = state.schedule
    vanilla = vanilla_prototypes(episode)
    targets = adapted_targets(episode, vanilla, cfg, state.cache)
    raw_signal = targets - vanilla.vectors if cfg.residual else targets
    scale = raw_signal.dtype.type(state.signal_scale)
    signal = raw_signal / scale

    t = rng.child("t").integers(1, sched.timesteps + 1)
    eps = rng.child("eps").standard_normal(signal.shape, dtype=signal.dtype)

    class_ids = episode.class_ids if cfg.cond_mode == COND_LEARNED else None
    noised = forward_diffuse(signal, t, eps, sched)
    pred = model.forward(noised, vanilla.vectors, t, class_ids)

    residual_err = nm.sub(pred, Tensor(signal))
    diff_part = nm.tmean(nm.mul(residual_err, residual_err))

    scaled_pred = nm.mul(pred, scale)
    protos = nm.add(Tensor(vanilla.vectors), scaled_pred) if cfg.residual else scaled_pred
    queries, labels = episode.query_flat()
    logits = prototype_logits(Tensor(queries), protos, cfg.metric())
    ce_part = nm.cross_entropy_with_logits(logits, labels, reduction="mean")

    total = nm.add(ce_part, nm.mul(diff_part, float(cfg.loss_weight)))
    return total, ce_part, diff_part


def calibrate_signal_scale(dataset: EmbeddingDataset, cfg: TrainConfig, n_probe: int = 32) -> float:
    """Root-mean-square of the diffusion target over held-aside probe episodes.

    Standardizing by this value puts the target near unit variance, so the
    sampler's pure-noise start sits on the forward marginal at t = T.
    """
    total = 0.0
    count = 0
    for i in range(n_probe):
        seed = int(RngStream(cfg.seed).child("scale-probe", i).raw(1)[0])
        episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.q_query, seed)
        vanilla = vanilla_prototypes(episode)
        targets = adapted_targets(episode, vanilla, cfg)
        signal = targets - vanilla.vectors if cfg.residual else targets
        total += float(np.mean(np.square(signal, dtype=np.float64)))
        count += 1
    rms = float(np.sqrt(total / max(count, 1)))
    return max(rms, 1e-6)


def _new_state(dataset: EmbeddingDataset, cfg: TrainConfig) -> TrainState:
    n_classes = (max(dataset.classes) + 1) if dataset.classes else 0
    dconfig = cfg.denoiser_config(dataset.dim, n_classes)
    model = DenoiserModel(dconfig, RngStream(cfg.seed).child("model-init"))
    model.init_identity()
    momentum_buffers = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    scale = cfg.signal_scale if cfg.signal_scale > 0 else calibrate_signal_scale(dataset, cfg)
    return TrainState(
        model=model,
        config=cfg,
        schedule=linear_schedule(cfg.timesteps),
        momentum_buffers=momentum_buffers,
        signal_scale=float(np.float32(scale)),
    )


def meta_train(dataset: EmbeddingDataset, cfg: TrainConfig,
               state: TrainState | None = None, log_every: int = 0) -> TrainState:
    """Run (or resume) episodic training up to ``cfg.total_episodes``.

    Resumption must start on a task-batch boundary, otherwise gradient
    averaging groups would differ from the uninterrupted run.
    """
    if state is None:
        state = _new_state(dataset, cfg)
    else:
        cfg = state.config
    if state.episodes_done % cfg.task_batch_size:
        raise ValueError(
            f"resume point {state.episodes_done} is not a multiple of task_batch_size {cfg.task_batch_size}"
        )
    model = state.model
    lr = np.float32(cfg.learning_rate)
    mu = np.float32(cfg.momentum)
    root = RngStream(cfg.seed)

    index = state.episodes_done
    while index < cfg.total_episodes:
        batch = range(index, min(index + cfg.task_batch_size, cfg.total_episodes))
        grads = {name: np.zeros_like(p.data) for name, p in model.params.items()}
        scale = np.float32(1.0 / len(batch))
        for episode_index in batch:
            seed = episode_seed_for(cfg.seed, episode_index)
            episode = sample_episode(dataset, cfg.n_way, cfg.k_shot, cfg.q_query, seed)
            draw_rng = root.child("draws", episode_index)
            for p in model.params.values():
                p.zero_grad()
            with Tape() as tape:
                total, ce, diff = episode_loss(episode, state, draw_rng)
            value = total.item()
            state.history_ce.append(np.float32(ce.item()))
            state.history_diff.append(np.float32(diff.item()))
            state.history_total.append(np.float32(value))
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise TrainingDiverged(
                    f"loss {value:.4g} at episode {episode_index}", state.history_rows()
                )
            nm.backward(tape, total)
            for name, p in model.params.items():
                if p.grad is not None:
                    grads[name] += p.grad
        for name, p in model.params.items():
            buf = state.momentum_buffers[name]
            buf *= mu
            buf += grads[name] * scale
            p.data = p.data - lr * buf
        index = batch.stop
        state.episodes_done = index
        if log_every and (index % log_every == 0):
            recent = np.mean(state.history_total[-len(batch):])
            print(f"episode {index}: total {recent:.4f}")
    return state


def write_loss_table(state: TrainState, path) -> None:
    """Plain-text loss history: episode, ce, diff, total."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("episode\tce\tdiff\ttotal\n")
        for i, (ce, diff, total) in enumerate(state.history_rows()):
            fh.write(f"{i}\t{float(ce)!r}\t{float(diff)!r}\t{float(total)!r}\n")


def _config_blob(cfg: TrainConfig) -> np.ndarray:
    payload = asdict(cfg)
    raw = json.dumps(payload, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def _config_from_blob(arr: np.ndarray) -> TrainConfig:
    raw = arr.astype(np.uint8).tobytes()
    payload = json.loads(raw.decode("utf-8"))
    overfit = OverfitConfig(**payload.pop("overfit"))
    return TrainConfig(overfit=overfit, **payload)


def save_checkpoint(state: TrainState, path) -> None:
    """One-file checkpoint: parameters, momentum buffers, history, config."""
    arrays = {}
    for name, p in state.model.params.items():
        arrays[f"param/{name}"] = p.data
    for name, buf in state.momentum_buffers.items():
        arrays[f"opt/{name}"] = buf
    arrays["meta/episodes"] = np.array([state.episodes_done], dtype=np.float32)
    arrays["meta/history"] = np.array(
        [state.history_ce, state.history_diff, state.history_total], dtype=np.float32
    ).reshape(3, -1)
    arrays["meta/config_json"] = _config_blob(state.config)
    save_arrays(arrays, path)


def load_checkpoint(path, proto_dim: int | None = None) -> TrainState:
    """Rebuild a TrainState; shapes are validated parameter by parameter."""
    from .data import FormatError
    from .denoiser import load_model_arrays

    arrays = load_arrays(path)
    if "meta/config_json" not in arrays:
        raise FormatError("truncated", f"{path}: missing config record")
    cfg = _config_from_blob(arrays["meta/config_json"])
    param_names = [k[len("param/"):] for k in arrays if k.startswith("param/")]
    if proto_dim is None:
        if "param/decoder/b" not in arrays:
            raise FormatError("truncated", f"{path}: missing decoder parameters")
        proto_dim = int(arrays["param/decoder/b"].shape[0])
    n_classes = int(arrays["param/class_embed"].shape[0]) if "param/class_embed" in arrays else 0
    dconfig = cfg.denoiser_config(proto_dim, n_classes)
    model = DenoiserModel(dconfig, RngStream(cfg.seed).child("model-init"))
    expected = set(model.params)
    if set(param_names) != expected:
        missing = sorted(expected - set(param_names))
        extra = sorted(set(param_names) - expected)
        raise FormatError("dim_mismatch", f"{path}: parameter set mismatch (missing {missing}, extra {extra})")
    load_model_arrays(model, arrays, prefix="param/")
    momentum_buffers = {}
    for name, p in model.params.items():
        key = f"opt/{name}"
        if key not in arrays:
            raise FormatError("truncated", f"{path}: missing momentum buffer {key!r}")
        if tuple(arrays[key].shape) != tuple(p.shape):
            raise FormatError("dim_mismatch", f"shape mismatch for {key!r}")
        momentum_buffers[name] = arrays[key].astype(np.float32, copy=True)
    history = arrays.get("meta/history", np.zeros((3, 0), dtype=np.float32))
    return TrainState(
        model=model,
        config=cfg,
        schedule=linear_schedule(cfg.timesteps),
        momentum_buffers=momentum_buffers,
        episodes_done=int(arrays["meta/episodes"][0]),
        history_ce=[np.float32(v) for v in history[0]],
        history_diff=[np.float32(v) for v in history[1]],
        history_total=[np.float32(v) for v in history[2]],
    )
