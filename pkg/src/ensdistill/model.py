"""Shared-encoder student/teacher with m projection heads and m codebooks.

One encoder MLP produces the representation used downstream; each head j
owns a throw-away projection MLP and a c-by-d codebook. Predictions are a
temperatured softmax over cosine similarities between the projected
embedding and the codebook rows. The teacher is an EMA copy of the student
that never receives gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as td
from .errors import CheckpointFormatError, ConfigError, ShapeError
from .regularize import CenterState, center_apply, sinkhorn
from .tensor import Tensor

_MAGIC = b"ENSD"
_VERSION = 1


@dataclass(frozen=True)
class ModelDims:
    """Architecture sizes; encoder/head widths are the hidden layers only."""

    input_dim: int
    repr_dim: int = 32
    embed_dim: int = 16
    codebook_size: int = 64
    heads: int = 8
    encoder_hidden: tuple[int, ...] = (256, 256)
    head_hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")
        if self.codebook_size < 2 or self.embed_dim < 2:
            raise ConfigError("codebook_size and embed_dim must be >= 2")
        if self.activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def encoder_layer_sizes(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.encoder_hidden, self.repr_dim)
        return list(zip(widths[:-1], widths[1:]))

    def head_layer_sizes(self) -> list[tuple[int, int]]:
        widths = (self.repr_dim, *self.head_hidden, self.embed_dim)
        return list(zip(widths[:-1], widths[1:]))


@dataclass
class ModelParams:
    """All student parameters as named float64 arrays.

    Naming: ``enc.{layer}.{w|b}``, ``head.{j}.{layer}.{w|b}``, ``code.{j}``.
    ``named()`` yields a stable order used by the optimizer, EMA and
    checkpoint format alike.
    """

    dims: ModelDims
    tensors: dict[str, np.ndarray]

    def named(self) -> list[tuple[str, np.ndarray]]:
        return list(self.tensors.items())

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def codebook(self, j: int) -> np.ndarray:
        return self.tensors[f"code.{j}"]


@dataclass
class TeacherState:
    """EMA copy of the student plus optional per-head centering state."""

    params: ModelParams
    centers: list[CenterState] = field(default_factory=list)
    momentum: float = 0.996

    @classmethod
    def from_student(cls, student: ModelParams, momentum: float = 0.996,
                     center_rate: float = 0.9) -> "TeacherState":
        dims = student.dims
        centers = [
            CenterState(np.zeros(dims.codebook_size), rate=center_rate)
            for _ in range(dims.heads)
        ]
        return cls(params=student.copy(), centers=centers, momentum=momentum)


def init_params(seed: int, dims: ModelDims) -> ModelParams:
    """Deterministic initialization; head j draws from its own stream.

    Linear weights are fan-in-scaled uniform, biases zero. Codebook rows are
    unit-scale gaussian and deliberately not normalized: the cosine in the
    prediction already makes code scale irrelevant. Head j (1-based, as the
    math indexes heads) seeds its stream with seed xor j so diversity
    experiments are reproducible head by head.
    """
    if seed < 0:
        raise ConfigError("seed must be nonnegative")
    tensors: dict[str, np.ndarray] = {}
    rng = np.random.default_rng(seed)
    for i, (fan_in, fan_out) in enumerate(dims.encoder_layer_sizes()):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[f"enc.{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        tensors[f"enc.{i}.b"] = np.zeros(fan_out)
    for j in range(dims.heads):
        hrng = np.random.default_rng(seed ^ (j + 1))
        for i, (fan_in, fan_out) in enumerate(dims.head_layer_sizes()):
            bound = 1.0 / np.sqrt(fan_in)
            tensors[f"head.{j}.{i}.w"] = hrng.uniform(-bound, bound, size=(fan_in, fan_out))
            tensors[f"head.{j}.{i}.b"] = np.zeros(fan_out)
        tensors[f"code.{j}"] = hrng.normal(size=(dims.codebook_size, dims.embed_dim))
    return ModelParams(dims=dims, tensors=tensors)


def param_tensors(params: ModelParams, trainable: bool = False) -> dict[str, Tensor]:
    """Wrap parameter arrays as leaves (trainable) or constants."""
    if trainable:
        return {k: td.leaf(k, v) for k, v in params.tensors.items()}
    return {k: td.const(v) for k, v in params.tensors.items()}


def _activation(dims: ModelDims):
    return td.gelu if dims.activation == "gelu" else td.relu


def _mlp(x: Tensor, ts: dict[str, Tensor], prefix: str, n_layers: int, act) -> Tensor:
    out = x
    for i in range(n_layers):
        out = td.add_rowvec(td.matmul(out, ts[f"{prefix}.{i}.w"]), ts[f"{prefix}.{i}.b"])
        if i + 1 < n_layers:
            out = act(out)
    return out


def encode(x, ts: dict[str, Tensor], dims: ModelDims) -> Tensor:
    """Encoder forward: batch (b, input_dim) -> representations (b, repr_dim)."""
    return _mlp(td.as_tensor(x), ts, "enc", len(dims.encoder_layer_sizes()), _activation(dims))


def head_logits(z: Tensor, ts: dict[str, Tensor], dims: ModelDims, j: int) -> Tensor:
    """Cosine logits of head j from representations: (b, repr_dim) -> (b, c)."""
    emb = _mlp(z, ts, f"head.{j}", len(dims.head_layer_sizes()), _activation(dims))
    emb_n = td.row_l2_normalize(emb)
    code_n = td.row_l2_normalize(ts[f"code.{j}"])
    return td.matmul(emb_n, td.transpose(code_n))


def student_logprobs(x_batch, params: ModelParams, j: int, tau_s: float) -> Tensor:
    """Log-probabilities of head j, softmax over cos(h_j(r(x)), mu_jy) / tau_s.

    Differentiable in the encoder, head-j and codebook-j parameters when the
    caller supplies leaf tensors via the lower-level ``encode``/``head_logits``
    path; this convenience wrapper evaluates with constants.
    """
    ts = param_tensors(params)
    z = encode(x_batch, ts, params.dims)
    return td.log_softmax_rows(head_logits(z, ts, params.dims, j), temperature=tau_s)


def teacher_logprobs(
    x_batch,
    teacher: TeacherState,
    j: int,
    tau_t: float,
    renorm: str = "none",
    sinkhorn_iters: int = 3,
) -> Tensor:
    """Teacher predictions for head j with the selected renormalization.

    renorm="none": plain temperatured softmax. "center": the running center
    is subtracted from the raw cosine logits first. "sinkhorn": the positive
    matrix exp(logits/tau_t) is Sinkhorn-normalized per batch and per head
    (heads stay independent), yielding normalized rows. The result is always
    passed through stop_gradient, so it carries exactly zero gradient.
    """
    dims = teacher.params.dims
    ts = param_tensors(teacher.params)
    z = encode(x_batch, ts, dims)
    logits = head_logits(z, ts, dims, j).data
    if renorm == "none":
        out = _log_softmax_np(logits / tau_t)
    elif renorm == "center":
        out = _log_softmax_np(center_apply(logits, teacher.centers[j]) / tau_t)
    elif renorm == "sinkhorn":
        scaled = (logits - logits.max()) / tau_t  # global shift: exactly absorbed by the first column step
        out = np.log(sinkhorn(np.exp(scaled), iters=sinkhorn_iters))
    else:
        raise ConfigError(f"unknown renorm mode {renorm!r}")
    return td.stop_gradient(td.const(out))


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return (z - m) - np.log(e.sum(axis=1, keepdims=True))


def ema_update(teacher: TeacherState, student: ModelParams, eta: float) -> TeacherState:
    """teacher <- eta * teacher + (1 - eta) * student, elementwise.

    eta=1 and eta=0 short-circuit so the endpoints are bit-exact even for
    -0.0 entries (1*t + 0*s would flip the sign of negative zeros).
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    tt, st = teacher.params.tensors, student.tensors
    if tt.keys() != st.keys():
        raise ShapeError("teacher/student parameter sets differ")
    if eta == 1.0:
        return teacher
    if eta == 0.0:
        for k in tt:
            np.copyto(tt[k], st[k])
        return teacher
    for k in tt:
        if tt[k].shape != st[k].shape:
            raise ShapeError(f"shape mismatch for {k}: {tt[k].shape} vs {st[k].shape}")
        tt[k] *= eta
        tt[k] += (1.0 - eta) * st[k]
    return teacher


def save_checkpoint(params: ModelParams, teacher: TeacherState, step: int, path,
                    scheme: str = "", seeds: dict | None = None) -> None:
    """Write the binary checkpoint: magic, version, JSON header, f32 tensors.

    Layout: b"ENSD", u32 version=1, u64 header length, UTF-8 JSON header
    (dims, m, c, d, step, scheme, seeds and the tensor manifest), then every
    tensor as little-endian float32 in manifest order. Student tensors come
    first, then teacher tensors, then per-head centers.
    """
    dims = params.dims
    entries: list[tuple[str, np.ndarray]] = []
    for name, arr in params.named():
        entries.append((f"student/{name}", arr))
    for name, arr in teacher.params.named():
        entries.append((f"teacher/{name}", arr))
    for j, cs in enumerate(teacher.centers):
        entries.append((f"center.{j}", cs.center))
    header = {
        "dims": {
            "input_dim": dims.input_dim,
            "repr_dim": dims.repr_dim,
            "embed_dim": dims.embed_dim,
            "codebook_size": dims.codebook_size,
            "heads": dims.heads,
            "encoder_hidden": list(dims.encoder_hidden),
            "head_hidden": list(dims.head_hidden),
            "activation": dims.activation,
        },
        "m": dims.heads,
        "c": dims.codebook_size,
        "d": dims.embed_dim,
        "step": int(step),
        "scheme": scheme,
        "seeds": seeds or {},
        "momentum": teacher.momentum,
        "center_rate": teacher.centers[0].rate if teacher.centers else 0.9,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in entries:
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, TeacherState, dict]:
    """Read a checkpoint; returns (student, teacher, header metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointFormatError("bad magic bytes; not an ENSD checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) < 16 + hlen:
        raise CheckpointFormatError("truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    d = header["dims"]
    dims = ModelDims(
        input_dim=d["input_dim"],
        repr_dim=d["repr_dim"],
        embed_dim=d["embed_dim"],
        codebook_size=d["codebook_size"],
        heads=d["heads"],
        encoder_hidden=tuple(d["encoder_hidden"]),
        head_hidden=tuple(d["head_hidden"]),
        activation=d["activation"],
    )
    offset = 16 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointFormatError(f"truncated tensor data at {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        )
        offset = end
    student = ModelParams(
        dims=dims,
        tensors={
            n[len("student/"):]: a for n, a in tensors.items() if n.startswith("student/")
        },
    )
    teacher_params = ModelParams(
        dims=dims,
        tensors={
            n[len("teacher/"):]: a for n, a in tensors.items() if n.startswith("teacher/")
        },
    )
    centers = [
        CenterState(tensors[f"center.{j}"], rate=header.get("center_rate", 0.9))
        for j in range(dims.heads)
        if f"center.{j}" in tensors
    ]
    teacher = TeacherState(
        params=teacher_params, centers=centers, momentum=header.get("momentum", 0.996)
    )
    return student, teacher, header
