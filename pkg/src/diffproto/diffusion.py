"""Noise schedule, forward noising, and reverse sampling over prototypes.

Diffusion runs in residual space: the quantity being noised and denoised is
the per-task prototype update (adapted minus vanilla), and the vanilla
prototype is added back after the chain finishes. The non-residual ablation
skips the recombination and treats the prototype itself as the signal.

Three reverse modes are provided: ``direct`` (the sampled state is replaced
by the model prediction at each visited timestep), ``ancestral`` (stochastic
posterior steps with fixed variance), and ``ddim`` (deterministic jumps
between strided timesteps).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, ShapeError
from .protonet import DIFFUSED, PrototypeSet

BETA_START = 1e-4
BETA_END = 1e-2


@dataclass
class NoiseSchedule:
    """Per-timestep variance plan; arrays are indexed by t in 1..T.

    Index 0 is a sentinel (alpha_bar = 1, sigma = 0) so that a final jump
    to t = 0 needs no special casing.
    """

    timesteps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    one_minus_alpha_bars: np.ndarray
    sigmas: np.ndarray


def linear_schedule(timesteps: int) -> NoiseSchedule:
    """Linear beta ramp from 1e-4 (t=1) to 1e-2 (t=T)."""
    if timesteps < 2:
        raise ValueError(f"schedule needs at least 2 timesteps, got {timesteps}")
    t = np.arange(0, timesteps + 1, dtype=np.float64)
    betas = (BETA_START * (timesteps - t) + BETA_END * (t - 1)) / (timesteps - 1)
    betas[0] = 0.0
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    one_minus = 1.0 - alpha_bars
    sigmas = np.sqrt(betas)
    return NoiseSchedule(timesteps, betas, alphas, alpha_bars, one_minus, sigmas)


def _check_t(sched: NoiseSchedule, t: int):
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"timestep {t} outside 1..{sched.timesteps}")


def forward_diffuse(signal: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noised signal at timestep t: sqrt(abar_t) * signal + sqrt(1 - abar_t) * eps."""
    _check_t(sched, t)
    signal = np.asarray(signal)
    eps = np.asarray(eps)
    if signal.shape != eps.shape:
        raise ShapeError(f"signal shape {list(signal.shape)} != noise shape {list(eps.shape)}")
    a = float(np.sqrt(sched.alpha_bars[t]))
    b = float(np.sqrt(sched.one_minus_alpha_bars[t]))
    return a * signal + b * eps


def predicted_eps(pred_signal: np.ndarray, state: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noise implied by a signal prediction: invert the forward map at t."""
    _check_t(sched, t)
    denom = float(np.sqrt(sched.one_minus_alpha_bars[t]))
    if denom == 0.0:
        raise ValueError(f"cannot invert the forward map at t={t} (alpha_bar = 1)")
    a = float(np.sqrt(sched.alpha_bars[t]))
    return (np.asarray(state) - a * np.asarray(pred_signal)) / denom


def ancestral_step(state, pred_signal, t: int, sched: NoiseSchedule, noise=None) -> np.ndarray:
    """One stochastic reverse step t -> t-1 with fixed variance sigma_t^2 = beta_t.

    The posterior mean is evaluated with the implied-noise denominator folded
    into a single coefficient, so a zero prediction contracts to exactly zero
    at t = 1. The injected noise is forced to zero at t = 1 so the last step
    is deterministic.
    """
    _check_t(sched, t)
    state = np.asarray(state)
    # (1/sqrt(a_t)) * (state - (1-a_t)/sqrt(1-abar_t) * eps_hat), with
    # eps_hat = (state - sqrt(abar_t) * pred) / sqrt(1-abar_t) substituted in
    coef = float(1.0 - sched.alphas[t]) / float(sched.one_minus_alpha_bars[t])
    implied = state - float(np.sqrt(sched.alpha_bars[t])) * np.asarray(pred_signal)
    mean = (state - coef * implied) / float(np.sqrt(sched.alphas[t]))
    if t == 1 or noise is None:
        return mean
    return mean + float(sched.sigmas[t]) * np.asarray(noise)


def ddim_step(state, pred_signal, t: int, t_next: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic jump t -> t_next (t_next < t, possibly 0)."""
    _check_t(sched, t)
    if not 0 <= t_next < t:
        raise ValueError(f"ddim jump must go downward, got {t} -> {t_next}")
    eps_hat = predicted_eps(pred_signal, state, t, sched)
    a = float(np.sqrt(sched.alpha_bars[t_next]))
    b = float(np.sqrt(sched.one_minus_alpha_bars[t_next]))
    return a * np.asarray(pred_signal) + b * eps_hat


def direct_step(state, vanilla, t: int, denoiser) -> np.ndarray:
    """Replace the state by the model's signal prediction at t."""
    out = denoiser.predict(state, vanilla, t)
    if out.shape != np.asarray(state).shape:
        raise ShapeError(f"denoiser output {list(out.shape)} != state shape {list(np.asarray(state).shape)}")
    return out


def ddim_timesteps(timesteps: int, stride: int) -> list:
    """Evenly strided decreasing timestep list including both T and 1.

    stride=1 yields the full sequence T..1; stride=T yields [T, 1]; in
    between, about T/stride steps.
    """
    if not 1 <= stride <= timesteps:
        raise ValueError(f"stride {stride} outside 1..{timesteps}")
    count = max(2, round(timesteps / stride))
    if stride == 1:
        count = timesteps
    values = np.linspace(timesteps, 1, count)
    out = [int(round(v)) for v in values]
    out[0], out[-1] = timesteps, 1
    for a, b in zip(out, out[1:]):
        if b >= a:
            raise ValueError(f"degenerate timestep subsequence for T={timesteps}, stride={stride}")
    return out


@dataclass
class SamplerConfig:
    """How prototypes are sampled at meta-test time."""

    mode: str = "direct"
    stride: int = 10
    mc_samples: int = 1
    aggregate: str = "mean_probs"

    def __post_init__(self):
        if self.mode not in ("direct", "ancestral", "ddim"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.aggregate not in ("mean_probs", "mean_prototypes"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass
class DiffusionTrace:
    """Recorded (t, prototype matrix) pairs along one sampling chain."""

    entries: list = field(default_factory=list)

    def timesteps(self) -> list:
        return [t for t, _ in self.entries]

    def export_text(self, path) -> None:
        """One row per (t, class, coordinate, value), tab-separated."""
        with open(path, "w", encoding="ascii") as fh:
            fh.write("t\tclass\tcoord\tvalue\n")
            for t, matrix in self.entries:
                for c, row in enumerate(np.asarray(matrix)):
                    for d, v in enumerate(row):
                        fh.write(f"{t}\t{c}\t{d}\t{float(v)!r}\n")


def _run_chain(denoiser, vanilla: np.ndarray, sched: NoiseSchedule, cfg: SamplerConfig,
               chain_rng: RngStream, residual: bool, trace: DiffusionTrace | None):
    dtype = vanilla.dtype
    state = chain_rng.child("init").standard_normal(vanilla.shape, dtype=dtype)
    if cfg.mode == "ancestral" and cfg.stride != 1:
        raise ValueError("ancestral sampling requires stride=1 (consecutive timesteps)")
    steps = ddim_timesteps(sched.timesteps, cfg.stride)

    def snapshot(t, current):
        if trace is not None:
            proto = vanilla + current if residual else current
            trace.entries.append((t, np.array(proto, dtype=np.float64)))

    if cfg.mode == "direct":
        for t in steps:
            snapshot(t, state)
            state = direct_step(state, vanilla, t, denoiser)
    elif cfg.mode == "ddim":
        nexts = steps[1:] + [0]
        for t, t_next in zip(steps, nexts):
            snapshot(t, state)
            pred = denoiser.predict(state, vanilla, t)
            state = ddim_step(state, pred, t, t_next, sched).astype(dtype, copy=False)
    else:  # ancestral
        for t in steps:
            snapshot(t, state)
            pred = denoiser.predict(state, vanilla, t)
            noise = None if t == 1 else chain_rng.child("noise", t).standard_normal(state.shape, dtype=dtype)
            state = ancestral_step(state, pred, t, sched, noise).astype(dtype, copy=False)
    snapshot(0, state)
    return state


def sample_prototypes(denoiser, vanilla: PrototypeSet, sched: NoiseSchedule, cfg: SamplerConfig,
                      rng: RngStream, residual: bool = True, record_trace: bool = False):
    """Run the configured reverse process and return final prototypes.

    Starts each chain from standard normal noise, iterates the chosen mode
    over the strided timesteps, and recombines with the vanilla prototype
    when ``residual`` is on. With mc_samples > 1, the chains are kept as a
    Monte Carlo ensemble (``mean_probs``) or averaged (``mean_prototypes``).
    A trace of the first chain is recorded on request.
    """
    base = vanilla.vectors
    chains = []
    trace = DiffusionTrace() if record_trace else None
    for m in range(cfg.mc_samples):
        chain_rng = rng.child("chain", m)
        final = _run_chain(denoiser, base, sched, cfg, chain_rng, residual, trace if m == 0 else None)
        chains.append(base + final if residual else final)
    stacked = np.stack(chains)
    if cfg.mc_samples == 1:
        protos = PrototypeSet(stacked[0], kind=DIFFUSED)
    elif cfg.aggregate == "mean_prototypes":
        protos = PrototypeSet(stacked.mean(axis=0), kind=DIFFUSED)
    else:
        protos = PrototypeSet(stacked.mean(axis=0), kind=DIFFUSED, samples=stacked)
    return protos, trace
