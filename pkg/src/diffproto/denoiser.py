"""Transformer that predicts prototype residuals from noised inputs.

Token layout is fixed: N noised-residual tokens, then N conditioning tokens,
then one time token; learned position embeddings are bound to slot indices
(slot i carries episode label i, condition slots start at ``max_ways``).
Blocks are pre-norm with GELU MLPs and full (unmasked) attention over the
whole sequence. Only the first N output slots are decoded back to prototype
space, through a head that identity-initialization sets to exactly zero, so
an untrained model leaves prototypes untouched.

Checkpoints use a little-endian binary format: magic ``PDCK``, version u32,
parameter count u32, then per parameter a u16 name length, the UTF-8 name,
a u8 rank, u32 dims, and float32 values.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .data import FormatError
from .numerics import NumericsError, RngStream, ShapeError, Tensor

COND_VANILLA = "vanilla_prototype"
COND_LEARNED = "learned_class_embedding"
COND_NONE = "none"
COND_MODES = (COND_VANILLA, COND_LEARNED, COND_NONE)

CHECKPOINT_MAGIC = b"PDCK"
CHECKPOINT_VERSION = 1

INIT_STD = 0.02


@dataclass
class DenoiserConfig:
    """Architecture hyperparameters.

    The desk-scale default is 2 layers / 64 wide / 4 heads; the full-scale
    configuration from the GPT-2 lineage (12 / 512 / 16, MLP 512) is
    available through :func:`paper_scale_config`.
    """

    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    mlp_hidden: int = 128
    cond_mode: str = COND_VANILLA
    proto_dim: int = 32
    max_ways: int = 5
    timesteps: int = 100
    time_freqs: int = 8
    n_classes: int = 0  # size of the learned-class-embedding table

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.proto_dim < 1:
            raise ValueError("proto_dim must be >= 1")
        if self.cond_mode not in COND_MODES:
            raise ValueError(f"unknown cond_mode {self.cond_mode!r}")
        if self.cond_mode == COND_LEARNED and self.n_classes < 1:
            raise ValueError("learned_class_embedding mode needs n_classes >= 1")


def paper_scale_config(**overrides) -> DenoiserConfig:
    base = dict(n_layers=12, d_model=512, n_heads=16, mlp_hidden=512)
    base.update(overrides)
    return DenoiserConfig(**base)


def encode_time(t: int, timesteps: int, n_freq: int) -> np.ndarray:
    """Frequency features of a scalar timestep: sin then cos of pi*2^k*t/T."""
    if not 0 <= t <= timesteps:
        raise ValueError(f"timestep {t} outside 0..{timesteps}")
    phase = math.pi * t / timesteps
    ks = np.exp2(np.arange(n_freq, dtype=np.float64)) * phase
    return np.concatenate([np.sin(ks), np.cos(ks)])


class DenoiserModel:
    """Owns the parameter tensors and the forward pass."""

    def __init__(self, config: DenoiserConfig, rng: RngStream, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype).type
        self.params: dict[str, Tensor] = {}
        c = config

        def normal(name, shape, std=INIT_STD):
            data = rng.child("init", name).standard_normal(shape, dtype=self.dtype) * self.dtype(std)
            self.params[name] = nm.parameter(data, dtype=self.dtype)

        def zeros(name, shape):
            self.params[name] = nm.parameter(np.zeros(shape, dtype=self.dtype), dtype=self.dtype)

        def ones(name, shape):
            self.params[name] = nm.parameter(np.ones(shape, dtype=self.dtype), dtype=self.dtype)

        normal("proj_resid/w", (c.proto_dim, c.d_model))
        zeros("proj_resid/b", (c.d_model,))
        normal("proj_cond/w", (c.proto_dim, c.d_model))
        zeros("proj_cond/b", (c.d_model,))
        normal("time_proj/w", (2 * c.time_freqs, c.d_model))
        zeros("time_proj/b", (c.d_model,))
        normal("pos_embed", (2 * c.max_ways + 1, c.d_model))
        if c.cond_mode == COND_LEARNED:
            normal("class_embed", (c.n_classes, c.proto_dim))
        for i in range(c.n_layers):
            ones(f"block{i}/ln1/g", (c.d_model,))
            zeros(f"block{i}/ln1/b", (c.d_model,))
            normal(f"block{i}/attn/wqkv", (c.d_model, 3 * c.d_model))
            zeros(f"block{i}/attn/bqkv", (3 * c.d_model,))
            normal(f"block{i}/attn/wo", (c.d_model, c.d_model))
            zeros(f"block{i}/attn/bo", (c.d_model,))
            ones(f"block{i}/ln2/g", (c.d_model,))
            zeros(f"block{i}/ln2/b", (c.d_model,))
            normal(f"block{i}/mlp/w1", (c.d_model, c.mlp_hidden))
            zeros(f"block{i}/mlp/b1", (c.mlp_hidden,))
            normal(f"block{i}/mlp/w2", (c.mlp_hidden, c.d_model))
            zeros(f"block{i}/mlp/b2", (c.d_model,))
        ones("ln_f/g", (c.d_model,))
        zeros("ln_f/b", (c.d_model,))
        normal("decoder/w", (c.d_model, c.proto_dim))
        zeros("decoder/b", (c.proto_dim,))

    def init_identity(self) -> None:
        """Zero the decoder head so the model output is exactly zero."""
        self.params["decoder/w"].data[:] = 0.0
        self.params["decoder/b"].data[:] = 0.0

    def decoder_is_zero(self) -> bool:
        return not (self.params["decoder/w"].data.any() or self.params["decoder/b"].data.any())

    def parameters(self) -> dict:
        return self.params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _conditioning(self, vanilla: np.ndarray, class_ids) -> np.ndarray:
        c = self.config
        n = vanilla.shape[0]
        if c.cond_mode == COND_VANILLA:
            return vanilla
        if c.cond_mode == COND_NONE:
            return np.zeros_like(vanilla)
        rows = np.zeros((n, c.proto_dim), dtype=self.dtype)
        if class_ids is not None:
            ids = np.asarray(class_ids, dtype=np.int64)
            table = self.params["class_embed"].data
            in_table = (ids >= 0) & (ids < c.n_classes)
            rows[in_table] = table[ids[in_table]]
        return rows

    def _conditioning_tensor(self, vanilla: np.ndarray, class_ids):
        # learned embeddings must stay differentiable; other modes are constants
        c = self.config
        if c.cond_mode == COND_LEARNED and class_ids is not None:
            ids = np.asarray(class_ids, dtype=np.int64)
            if ((ids >= 0) & (ids < c.n_classes)).all():
                return nm.gather_rows(self.params["class_embed"], ids)
        return Tensor(self._conditioning(vanilla, class_ids))

    def build_tokens(self, state, vanilla, t: int, class_ids=None) -> Tensor:
        """Project and position-embed the [2N+1, d_model] token sequence."""
        c = self.config
        state_t = state if isinstance(state, Tensor) else Tensor(np.asarray(state, dtype=self.dtype))
        vanilla_arr = np.asarray(vanilla, dtype=self.dtype)
        n = state_t.shape[0]
        if state_t.ndim != 2 or state_t.shape[1] != c.proto_dim:
            raise ShapeError(f"state must be [N, {c.proto_dim}], got {list(state_t.shape)}")
        if vanilla_arr.shape != tuple(state_t.shape):
            raise ShapeError(f"vanilla shape {list(vanilla_arr.shape)} != state shape {list(state_t.shape)}")
        if n > c.max_ways:
            raise ShapeError(f"episode has {n} ways, model supports at most {c.max_ways}")
        p = self.params
        resid_tokens = nm.add(nm.matmul(state_t, p["proj_resid/w"]), p["proj_resid/b"])
        cond = self._conditioning_tensor(vanilla_arr, class_ids)
        cond_tokens = nm.add(nm.matmul(cond, p["proj_cond/w"]), p["proj_cond/b"])
        enc = encode_time(t, c.timesteps, c.time_freqs).astype(self.dtype)
        time_token = nm.add(nm.matmul(Tensor(enc[None, :]), p["time_proj/w"]), p["time_proj/b"])
        seq = nm.concat([resid_tokens, cond_tokens, time_token], axis=0)
        slots = np.concatenate([
            np.arange(n),
            c.max_ways + np.arange(n),
            [2 * c.max_ways],
        ])
        return nm.add(seq, nm.gather_rows(p["pos_embed"], slots))

    def _attention(self, x: Tensor, i: int) -> Tensor:
        c = self.config
        p = self.params
        s = x.shape[0]
        dh = c.d_model // c.n_heads
        qkv = nm.add(nm.matmul(x, p[f"block{i}/attn/wqkv"]), p[f"block{i}/attn/bqkv"])
        heads = []
        for part in range(3):
            sliced = nm.narrow(qkv, 1, part * c.d_model, c.d_model)
            heads.append(nm.transpose(nm.reshape(sliced, (s, c.n_heads, dh)), (1, 0, 2)))
        q, k, v = heads
        scores = nm.mul(nm.matmul(q, nm.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
        attn = nm.softmax(scores, axis=-1)
        mixed = nm.reshape(nm.transpose(nm.matmul(attn, v), (1, 0, 2)), (s, c.d_model))
        return nm.add(nm.matmul(mixed, p[f"block{i}/attn/wo"]), p[f"block{i}/attn/bo"])

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        p = self.params
        h = nm.gelu(nm.add(nm.matmul(x, p[f"block{i}/mlp/w1"]), p[f"block{i}/mlp/b1"]))
        return nm.add(nm.matmul(h, p[f"block{i}/mlp/w2"]), p[f"block{i}/mlp/b2"])

    def denoise(self, tokens: Tensor, n_ways: int) -> Tensor:
        """Full transformer pass; decodes the first ``n_ways`` output slots."""
        c = self.config
        p = self.params
        x = tokens
        for i in range(c.n_layers):
            normed = nm.layer_norm(x, p[f"block{i}/ln1/g"], p[f"block{i}/ln1/b"])
            x = nm.add(x, self._attention(normed, i))
            normed = nm.layer_norm(x, p[f"block{i}/ln2/g"], p[f"block{i}/ln2/b"])
            x = nm.add(x, self._mlp(normed, i))
            if not np.isfinite(x.data).all():
                raise NumericsError(f"non-finite activations leaving block{i}")
        x = nm.layer_norm(x, p["ln_f/g"], p["ln_f/b"])
        front = nm.narrow(x, 0, 0, n_ways)
        out = nm.add(nm.matmul(front, p["decoder/w"]), p["decoder/b"])
        if not np.isfinite(out.data).all():
            raise NumericsError("non-finite activations leaving decoder")
        return out

    def forward(self, state, vanilla, t: int, class_ids=None) -> Tensor:
        """Differentiable residual prediction for training graphs."""
        tokens = self.build_tokens(state, vanilla, t, class_ids)
        n = np.asarray(state).shape[0] if not isinstance(state, Tensor) else state.shape[0]
        return self.denoise(tokens, n)

    def predict(self, state, vanilla, t: int, class_ids=None) -> np.ndarray:
        """Evaluation-path prediction as a plain array (no recording)."""
        return self.forward(state, vanilla, t, class_ids).data


class EpisodeDenoiser:
    """Binds a model to one episode's class ids for the sampling loop."""

    def __init__(self, model: DenoiserModel, class_ids=None):
        self.model = model
        self.class_ids = class_ids

    def predict(self, state, vanilla, t):
        return self.model.predict(state, vanilla, t, self.class_ids)


def init_identity(model: DenoiserModel) -> None:
    model.init_identity()


def save_arrays(arrays: dict, path) -> None:
    """Write named float32 arrays in the checkpoint container format."""
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path) -> dict:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad_magic", f"{path}: not a checkpoint file (magic {blob[:4]!r})")
    if len(blob) < 12:
        raise FormatError("truncated", f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError("bad_version", f"{path}: unsupported checkpoint version {version}")
    arrays: dict = {}
    offset = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            if len(blob[offset:offset + name_len]) != name_len:
                raise FormatError("truncated", f"{path}: truncated parameter name")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = offset + 4 * n_values
            if end > len(blob):
                raise FormatError("truncated", f"{path}: truncated values for {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset).reshape(dims).copy()
            offset = end
    except struct.error as exc:
        raise FormatError("truncated", f"{path}: truncated payload") from exc
    if offset != len(blob):
        raise FormatError("truncated", f"{path}: {len(blob) - offset} trailing bytes")
    return arrays


def save_model(model: DenoiserModel, path) -> None:
    save_arrays({name: p.data for name, p in model.params.items()}, path)


def load_model_arrays(model: DenoiserModel, arrays: dict, prefix: str = "") -> None:
    """Copy named arrays into the model, validating every shape."""
    for name, param in model.params.items():
        key = prefix + name
        if key not in arrays:
            raise FormatError("truncated", f"checkpoint is missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(param.shape):
            raise FormatError(
                "dim_mismatch",
                f"shape mismatch for {key!r}: checkpoint {list(arr.shape)} vs model {list(param.shape)}",
            )
        param.data = arr.astype(model.dtype, copy=True)


def load_model(config: DenoiserConfig, path, rng: RngStream | None = None) -> DenoiserModel:
    model = DenoiserModel(config, rng or RngStream(0))
    load_model_arrays(model, load_arrays(path))
    return model
