"""Training loop: schedules, AdamW, view pairing, loss assembly, EMA."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as td
from .data import Dataset, ViewBatch, make_views
from .errors import ConfigError, DivergenceError
from .losses import (
    SCHEME_TAGS,
    WeightingScheme,
    ensemble_loss,
    ent_weights,
    loss_ent_fast,
    loss_prob_fast,
    loss_unif_fast,
    weight_mass_per_head,
)
from .measures import entropy_from_logs
from .model import (
    ModelDims,
    ModelParams,
    TeacherState,
    ema_update,
    encode,
    head_logits,
    init_params,
    param_tensors,
    save_checkpoint,
)
from .regularize import center_apply, center_update, memax_term, sinkhorn
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Every knob of a training run; defaults are the desk-scale recipe."""

    # data/model geometry
    input_dim: int = 32
    heads: int = 8
    codebook_size: int = 64
    embed_dim: int = 16
    repr_dim: int = 32
    encoder_hidden: tuple[int, ...] = (256, 256)
    head_hidden: tuple[int, ...] = (64, 64)
    activation: str = "gelu"
    # optimization
    epochs: int = 40
    batch_size: int = 128
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 5
    weight_decay_start: float = 0.04
    weight_decay_end: float = 0.4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 3.0
    # teacher
    momentum_start: float = 0.996
    momentum_end: float = 1.0
    tau_s: float = 0.1
    tau_t_start: float = 0.05
    tau_t_end: float = 0.025
    tau_t_decay_epochs: int = 30
    renorm: str = "sinkhorn"
    sinkhorn_iters: int = 3
    center_rate: float = 0.9
    # loss
    scheme: str = "Ent"
    gamma: float | None = None  # None: Ent uses the scheduled log(c)-scaled default
    aligned: bool = False
    gamma_init_scale: float = 0.5
    gamma_target_scale: float = 0.05
    gamma_decay_epochs: int = 30
    lambda_memax: float = 0.0
    divergence_threshold: float = 1e4
    # views
    views_global: int = 2
    views_local: int = 4
    noise_global: float = 0.25
    noise_local: float = 0.75
    mask_ratio: float = 0.2
    # bookkeeping
    seed: int = 0
    save_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scheme not in SCHEME_TAGS:
            raise ConfigError(
                f"unknown scheme {self.scheme!r}; valid schemes: {', '.join(SCHEME_TAGS)}"
            )
        for name in ("epochs", "warmup_epochs", "tau_t_decay_epochs", "gamma_decay_epochs",
                     "views_local", "save_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "heads", "codebook_size", "embed_dim", "repr_dim",
                     "views_global", "sinkhorn_iters"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("base_lr", "tau_s", "tau_t_start", "tau_t_end", "divergence_threshold"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"{name} must be positive")
        for name in ("min_lr", "weight_decay_start", "weight_decay_end", "lambda_memax",
                     "noise_global", "noise_local", "grad_clip"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")
        if not (0.0 <= self.momentum_start <= 1.0 and 0.0 <= self.momentum_end <= 1.0):
            raise ConfigError("momentum must be in [0, 1]")
        if self.tau_t_start < self.tau_t_end:
            raise ConfigError("tau_t warm start must be >= its target")
        if self.renorm not in ("none", "center", "sinkhorn"):
            raise ConfigError(f"unknown renorm mode {self.renorm!r}")
        if self.gamma is not None and self.scheme not in ("ProbMax", "ProbMaxTe"):
            if not self.gamma > 0.0:
                raise ConfigError("gamma must be positive")
        if self.views_global + self.views_local < 2:
            raise ConfigError("need at least two views to form teacher/student pairs")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def dims(self) -> ModelDims:
        return ModelDims(
            input_dim=self.input_dim,
            repr_dim=self.repr_dim,
            embed_dim=self.embed_dim,
            codebook_size=self.codebook_size,
            heads=self.heads,
            encoder_hidden=tuple(self.encoder_hidden),
            head_hidden=tuple(self.head_hidden),
            activation=self.activation,
        )

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def cosine_schedule(start: float, end: float, step: int, total: int) -> float:
    """end + (start-end)*(1+cos(pi*step/total))/2, clamped at end beyond total.

    Both endpoints are returned exactly (no float wobble from the formula).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if total <= 0 or step >= total:
        return end
    if step == 0:
        return start
    return end + (start - end) * (1.0 + math.cos(math.pi * step / total)) / 2.0


def linear_schedule(start: float, end: float, step: int, total: int) -> float:
    """Straight interpolation from start to end, clamped at end beyond total."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total <= 0 or step >= total:
        return end
    if step == 0:
        return start
    return start + (end - start) * (step / total)


@dataclass
class OptState:
    """AdamW first/second moment estimates, mirroring the parameter shapes."""

    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step_count: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptState":
        return cls(
            exp_avg={k: np.zeros_like(v) for k, v in params.tensors.items()},
            exp_avg_sq={k: np.zeros_like(v) for k, v in params.tensors.items()},
        )


def adamw_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    opt: OptState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ModelParams, OptState]:
    """One decoupled-weight-decay Adam step, in place.

    Weight decay shrinks parameters before the moment update is applied;
    non-finite gradients abort with the offending tensor name.
    """
    opt.step_count += 1
    t = opt.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, theta in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in tensor {name!r}")
        if theta.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if wd:
            theta *= 1.0 - lr * wd
        m = opt.exp_avg[name]
        v = opt.exp_avg_sq[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, opt


@dataclass
class StepSchedules:
    lr: float
    wd: float
    eta: float
    tau_t: float
    gamma: float


def schedules_at(cfg: TrainConfig, step: int, total_steps: int, steps_per_epoch: int) -> StepSchedules:
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        lr = cfg.base_lr * (step / warm)
    else:
        lr = cosine_schedule(cfg.base_lr, cfg.min_lr, step - warm, max(total_steps - warm, 1))
    wd = cosine_schedule(cfg.weight_decay_start, cfg.weight_decay_end, step, total_steps)
    eta = cosine_schedule(cfg.momentum_start, cfg.momentum_end, step, total_steps)
    tau_t = linear_schedule(
        cfg.tau_t_start, cfg.tau_t_end, step, cfg.tau_t_decay_epochs * steps_per_epoch
    )
    if cfg.gamma is not None:
        gamma = cfg.gamma
    elif cfg.scheme == "Ent":
        log_c = math.log(cfg.codebook_size)
        gamma = linear_schedule(
            cfg.gamma_init_scale * log_c,
            cfg.gamma_target_scale * log_c,
            step,
            cfg.gamma_decay_epochs * steps_per_epoch,
        )
    else:
        gamma = 1.0
    return StepSchedules(lr=lr, wd=wd, eta=eta, tau_t=tau_t, gamma=gamma)


def _teacher_cubes(global_views: list[np.ndarray], teacher: TeacherState, tau_t: float,
                   renorm: str, sinkhorn_iters: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-view teacher (b, m, c) log-prob cubes plus raw logits.

    All global views share one stacked encoder/head pass; renormalization is
    applied per view and per head, matching ``model.teacher_logprobs`` value
    for value.
    """
    dims = teacher.params.dims
    ts = param_tensors(teacher.params)
    b = global_views[0].shape[0]
    g = len(global_views)
    z = encode(np.concatenate(global_views, axis=0), ts, dims)
    cubes = [np.empty((b, dims.heads, dims.codebook_size)) for _ in range(g)]
    raws = [np.empty((b, dims.heads, dims.codebook_size)) for _ in range(g)]
    for j in range(dims.heads):
        all_logits = head_logits(z, ts, dims, j).data
        for k in range(g):
            logits = all_logits[k * b : (k + 1) * b]
            raws[k][:, j, :] = logits
            if renorm == "none":
                cubes[k][:, j, :] = _log_softmax_np(logits / tau_t)
            elif renorm == "center":
                cubes[k][:, j, :] = _log_softmax_np(
                    center_apply(logits, teacher.centers[j]) / tau_t
                )
            else:
                scaled = (logits - logits.max()) / tau_t
                cubes[k][:, j, :] = np.log(sinkhorn(np.exp(scaled), iters=sinkhorn_iters))
    return cubes, raws


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return (z - m) - np.log(e.sum(axis=1, keepdims=True))


def _student_cubes(views: ViewBatch, leaves: dict[str, Tensor], dims: ModelDims,
                   tau_s: float) -> list[Tensor]:
    """Per-view (b, m, c) student log-prob cubes, sharing one stacked encode."""
    b = views.all_views[0].shape[0]
    stacked = np.concatenate(views.all_views, axis=0)
    z = encode(stacked, leaves, dims)
    cubes = []
    per_head = [
        td.log_softmax_rows(head_logits(z, leaves, dims, j), temperature=tau_s)
        for j in range(dims.heads)
    ]
    for i in range(len(views.all_views)):
        cubes.append(td.stack([td.take_rows(h, i * b, (i + 1) * b) for h in per_head], axis=1))
    return cubes


def _pair_loss(scheme: WeightingScheme, cube_t: np.ndarray, cube_s: Tensor,
               ent_w: np.ndarray | None = None) -> Tensor:
    """Scheme dispatch for one (teacher view, student view) pair.

    Unif/Ent take their fast paths (their aligned flag is idempotent); Prob
    takes the fast path only unaligned; everything else runs the general
    weighted path. ``ent_w`` carries precomputed per-view entropy weights.
    """
    if scheme.tag == "Unif":
        return loss_unif_fast(cube_t, cube_s)
    if scheme.tag == "Ent":
        return loss_ent_fast(cube_t, cube_s, scheme.gamma, weights=ent_w)
    if scheme.tag == "Prob" and not scheme.aligned:
        return loss_prob_fast(cube_t, cube_s)
    return ensemble_loss(cube_t, cube_s, scheme)


@dataclass
class StepDiagnostics:
    loss: float
    lr: float
    eta: float
    tau_t: float
    gamma: float
    head_entropy: np.ndarray
    weight_mass: np.ndarray


def batch_loss(
    batch: np.ndarray,
    leaves: dict[str, Tensor],
    teacher: TeacherState,
    cfg: TrainConfig,
    sched: StepSchedules,
    view_seed: int,
) -> tuple[Tensor, StepDiagnostics, list[np.ndarray]]:
    """Assemble the full multi-view loss for one batch.

    Teachers consume global views only; students consume every view; the
    loss is the mean over (teacher view, student view) pairs with unequal
    view index, plus the ME-MAX term when enabled. Returns the loss tensor,
    diagnostics and the raw teacher logits per global view (for centering).
    """
    dims = cfg.dims()
    views = make_views(
        batch,
        seed=view_seed,
        g=cfg.views_global,
        v=cfg.views_local,
        noise_global=cfg.noise_global,
        noise_local=cfg.noise_local,
        mask_ratio=cfg.mask_ratio,
    )
    scheme = WeightingScheme(cfg.scheme, gamma=sched.gamma, aligned=cfg.aligned)
    s_cubes = _student_cubes(views, leaves, dims, cfg.tau_s)
    t_cubes, t_raw = _teacher_cubes(
        views.global_views, teacher, sched.tau_t, cfg.renorm, cfg.sinkhorn_iters
    )
    ent_w = (
        [ent_weights(c, scheme.gamma) for c in t_cubes] if scheme.tag == "Ent" else None
    )

    pair_losses: list[Tensor] = []
    for ti in range(cfg.views_global):
        for sj in range(len(s_cubes)):
            if sj == ti:
                continue
            pair_losses.append(
                _pair_loss(scheme, t_cubes[ti], s_cubes[sj],
                           ent_w=ent_w[ti] if ent_w is not None else None)
            )
    loss = td.scale(td.tsum(td.stack(pair_losses, axis=0)), 1.0 / len(pair_losses))
    if cfg.lambda_memax > 0.0:
        pooled = td.concat(s_cubes, axis=0)
        loss = td.add(loss, memax_term(pooled, cfg.lambda_memax))

    head_entropy = np.mean(
        [entropy_from_logs(c).mean(axis=0) for c in t_cubes], axis=0
    )
    mass = _weight_mass_diag(scheme, t_cubes[0], s_cubes[1].data, ent_w)
    diag = StepDiagnostics(
        loss=float(loss.data),
        lr=sched.lr,
        eta=sched.eta,
        tau_t=sched.tau_t,
        gamma=sched.gamma,
        head_entropy=head_entropy,
        weight_mass=mass,
    )
    return loss, diag, t_raw


def _weight_mass_diag(scheme: WeightingScheme, cube_t: np.ndarray, cube_s: np.ndarray,
                      ent_w: list[np.ndarray] | None) -> np.ndarray:
    """Per-head weight-mass diagnostic on one view pair, via the per-scheme
    closed forms where cheap and the general weight cube otherwise."""
    m = cube_t.shape[1]
    if scheme.tag in ("Unif", "UnifAll"):
        return np.full(m, 1.0 / m)
    if scheme.tag == "Ent" and ent_w is not None:
        return ent_w[0].mean(axis=0)
    if scheme.tag == "Prob" and not scheme.aligned:
        s = np.exp(cube_s)
        return (s / s.sum(axis=1, keepdims=True)).mean(axis=(0, 2))
    return weight_mass_per_head(scheme, cube_t, cube_s)


def _view_seed(cfg_seed: int, step: int) -> int:
    return int(np.random.SeedSequence([cfg_seed, 977, step]).generate_state(1)[0])


def train_step(
    batch: np.ndarray,
    student: ModelParams,
    teacher: TeacherState,
    opt: OptState,
    cfg: TrainConfig,
    step: int,
    total_steps: int,
    steps_per_epoch: int,
) -> StepDiagnostics:
    """One optimization step: forward, backward, clip, AdamW, EMA, centering."""
    sched = schedules_at(cfg, step, total_steps, steps_per_epoch)
    leaves = param_tensors(student, trainable=True)
    loss, diag, t_raw = batch_loss(batch, leaves, teacher, cfg, sched, _view_seed(cfg.seed, step))
    if not np.isfinite(diag.loss) or diag.loss > cfg.divergence_threshold:
        raise DivergenceError(
            f"divergence: scheme {cfg.scheme} loss {diag.loss:.6g} exceeded "
            f"{cfg.divergence_threshold:g} at step {step}"
        )
    grads = td.backward(loss, leaves=leaves.values())
    if cfg.grad_clip > 0.0:
        total_sq = sum(float(np.sum(g * g)) for g in grads.values())
        norm = math.sqrt(total_sq)
        if norm > cfg.grad_clip:
            factor = cfg.grad_clip / norm
            for g in grads.values():
                g *= factor
    adamw_step(
        student, grads, opt, lr=sched.lr, wd=sched.wd,
        beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps,
    )
    ema_update(teacher, student, sched.eta)
    if cfg.renorm == "center":
        for j in range(cfg.heads):
            center_update(teacher.centers[j], np.concatenate([r[:, j, :] for r in t_raw], axis=0))
    return diag


@dataclass
class FitResult:
    params: ModelParams
    teacher: TeacherState
    steps: int
    checkpoint_path: str | None
    curves_path: str | None
    final_loss: float | None


def fit(cfg: TrainConfig, dataset: Dataset) -> FitResult:
    """Run the full training loop; deterministic given the config.

    Shuffling is seeded per (seed, epoch); the per-step loss, schedule values
    and per-head diagnostics stream into ``curves.csv``; the final model is
    checkpointed to ``checkpoint.ensd`` (plus every ``save_every`` epochs).
    Training never touches dataset labels.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.dim != cfg.input_dim:
        raise ConfigError(
            f"config input_dim={cfg.input_dim} but dataset has {dataset.dim} features"
        )
    dims = cfg.dims()
    student = init_params(cfg.seed, dims)
    teacher = TeacherState.from_student(
        student, momentum=cfg.momentum_start, center_rate=cfg.center_rate
    )
    opt = OptState.for_params(student)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch

    out_dir = cfg.out_dir
    curves_path = checkpoint_path = None
    writer = None
    fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        curves_path = os.path.join(out_dir, "curves.csv")
        checkpoint_path = os.path.join(out_dir, "checkpoint.ensd")
        fh = open(curves_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh)
        writer.writerow(
            ["step", "loss", "lr", "eta", "tau_t", "gamma"]
            + [f"head_entropy_{j}" for j in range(cfg.heads)]
            + [f"weight_mass_{j}" for j in range(cfg.heads)]
        )

    seeds = {"init": cfg.seed}
    step = 0
    last_loss = None
    try:
        for epoch in range(cfg.epochs):
            perm = np.random.default_rng([cfg.seed, 31, epoch]).permutation(n)
            feats = dataset.features[perm]
            for lo in range(0, n, cfg.batch_size):
                batch = feats[lo : lo + cfg.batch_size]
                diag = train_step(
                    batch, student, teacher, opt, cfg, step, total_steps, steps_per_epoch
                )
                last_loss = diag.loss
                if writer is not None:
                    writer.writerow(
                        [step, format(diag.loss, ".17g"), format(diag.lr, ".17g"),
                         format(diag.eta, ".17g"), format(diag.tau_t, ".17g"),
                         format(diag.gamma, ".17g")]
                        + [format(x, ".17g") for x in diag.head_entropy]
                        + [format(x, ".17g") for x in diag.weight_mass]
                    )
                step += 1
            if (
                out_dir is not None
                and cfg.save_every
                and (epoch + 1) % cfg.save_every == 0
                and epoch + 1 < cfg.epochs
            ):
                save_checkpoint(
                    student, teacher, step,
                    os.path.join(out_dir, f"checkpoint_ep{epoch + 1}.ensd"),
                    scheme=cfg.scheme, seeds=seeds,
                )
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(student, teacher, step, checkpoint_path, scheme=cfg.scheme, seeds=seeds)
    return FitResult(
        params=student,
        teacher=teacher,
        steps=step,
        checkpoint_path=checkpoint_path,
        curves_path=curves_path,
        final_loss=last_loss,
    )
