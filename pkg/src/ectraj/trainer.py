"""Multi-shot consistency training with ground-truth fusion of the teacher target.

One optimisation step on a batch of scenes:

1. encode the scene context once, shared by all K modes;
2. draw a student index ``t`` per scene from the lognormal pmf of the current
   curriculum grid and derive the teacher index ``r < t``;
3. noise the ground-truth latent K times with shared ``eps`` at ``sigma_t``
   (student) and ``sigma_r`` (teacher);
4. denoise both sides (teacher under EMA weights, no gradient), pick the
   best of K per agent by ADE on decoded trajectories;
5. fuse the teacher's pick with ground truth at the mask waypoints in
   trajectory space and re-encode;
6. loss ``w * ||student - fused||`` with ``w = 1 / (sigma_t - sigma_r)``, averaged
   over real agents; clipped AdamW step; EMA update of the teacher weights.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ectraj import autograd as ag
from ectraj.checkpoint import save_checkpoint
from ectraj.denoiser import DenoiserConfig, as_tensors, denoise, ema_update, encode_conditions, init_params
from ectraj.errors import ConfigError
from ectraj.features import SceneArrays, bucketed_batches, make_batch
from ectraj.latent import LatentCodec
from ectraj.metrics import ade
from ectraj.optim import AdamW, clip_grad_norm
from ectraj.schedule import Curriculum, TeacherScheduler, build_pmf, build_sigmas

log = logging.getLogger(__name__)

FUSIONS = ("NF", "FF", "R2", "Prog", "M+E")


@dataclass
class TrainConfig:
    epochs: int = 60
    K: int = 6
    ema_alpha: float = 0.999
    fusion: str = "M+E"
    schedule: str = "ECT"  # or "ICT"
    q: float = 4.0
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    grad_clip: float = 1.0
    base_N: int = 10
    k: float = 8.0
    b: float = 1.0
    best_of_k_space: str = "trajectory"  # or "latent"
    share_noise: bool = True
    val_every: int = 1  # epochs between validation passes (0 = never)
    val_scenes: int = 0  # 0 = the whole validation set
    checkpoint_every: int = 0  # epochs between intermediate checkpoints (0 = final only)

    def validate(self, T_f: int | None = None) -> None:
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion strategy {self.fusion!r}; expected one of {FUSIONS}")
        if self.schedule not in ("ECT", "ICT"):
            raise ConfigError(f"unknown schedule mode {self.schedule!r}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError("ema_alpha must lie in [0, 1]")
        if self.best_of_k_space not in ("trajectory", "latent"):
            raise ConfigError("best_of_k_space must be 'trajectory' or 'latent'")
        if self.batch_size < 1 or self.lr <= 0 or self.q <= 0:
            raise ConfigError("batch_size, lr and q must be positive")
        if T_f is not None and T_f < 2:
            raise ConfigError("fusion masks need at least two future waypoints")


# --- fusion masks -------------------------------------------------------------


@dataclass(frozen=True)
class FusionMask:
    """Binary weights over the T_f future waypoints (shared by x and y)."""

    strategy: str
    M: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.M, dtype=np.float64)
        if m.ndim != 1 or not np.isin(m, (0.0, 1.0)).all():
            raise ValueError("fusion mask must be a binary vector")
        object.__setattr__(self, "M", m)

    @property
    def indices(self) -> np.ndarray:
        return np.nonzero(self.M)[0]


def midpoint_endpoint(T_f: int) -> tuple[int, int]:
    return T_f // 2 - 1, T_f - 1


def progressive_count(epoch: int) -> int:
    return max(2, 10 - 2 * ((epoch - 1) // 10))


def evenly_spaced(T_f: int, count: int) -> np.ndarray:
    """``count`` indices ending at the last waypoint; two of them are the midpoint and endpoint."""
    count = min(count, T_f)
    return (np.arange(1, count + 1) * T_f) // count - 1


def progressive_mask(epoch: int, T_f: int) -> FusionMask:
    M = np.zeros(T_f)
    M[evenly_spaced(T_f, progressive_count(epoch))] = 1.0
    return FusionMask("Prog", M)


def fusion_mask(strategy: str, T_f: int, epoch: int = 1, rng: np.random.Generator | None = None) -> FusionMask:
    M = np.zeros(T_f)
    if strategy == "NF":
        pass
    elif strategy == "FF":
        M[:] = 1.0
    elif strategy == "M+E":
        M[list(midpoint_endpoint(T_f))] = 1.0
    elif strategy == "R2":
        if rng is None:
            raise ValueError("R2 needs a random generator")
        M[rng.choice(T_f, size=2, replace=False)] = 1.0
    elif strategy == "Prog":
        return progressive_mask(epoch, T_f)
    else:
        raise ConfigError(f"unknown fusion strategy {strategy!r}")
    return FusionMask(strategy, M)


# --- pieces of the objective ------------------------------------------------------


def noisy_modes(x0: np.ndarray, sigma, K: int, rng: np.random.Generator, eps: np.ndarray | None = None):
    """K noisy copies ``x0 + sigma * eps_k`` of ``x0`` ([B, ...]); returns (noisy [B, K, ...], eps).

    Pass the returned ``eps`` back in to noise the teacher side with the same draws.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    B = x0.shape[0]
    if eps is None:
        eps = rng.standard_normal((B, K) + x0.shape[1:])
    s = sigma.reshape((-1,) + (1,) * (eps.ndim - 1))
    return x0[:, None] + s * eps, eps


def best_of_k(outputs, gt, axis: int = 0) -> np.ndarray:
    """Index of the mode with minimum ADE (first one on ties).

    ``outputs`` has the mode axis at ``axis`` and ends in [T, 2]; ``gt`` ends
    in [T, 2] and broadcasts against the remaining axes.
    """
    outputs = np.moveaxis(np.asarray(outputs, dtype=np.float64), axis, 0)
    if outputs.shape[0] < 1:
        raise ValueError("need at least one mode")
    return np.argmin(ade(outputs, np.asarray(gt)[None]), axis=0)


def fuse_teacher(x0_teacher: np.ndarray, X_f: np.ndarray, mask: FusionMask, codec: LatentCodec,
                 return_trajectory: bool = False):
    """Decode the teacher latent, overwrite mask waypoints with ground truth, re-encode.

    ``x0_teacher`` [..., L]; ``X_f`` [..., T_f * 2] in the codec's trajectory space.
    """
    X_hat = codec.decode(x0_teacher)
    T_f = len(mask.M)
    shape = X_hat.shape[:-1] + (T_f, 2)
    M = mask.M[:, None]
    fused = (1.0 - M) * X_hat.reshape(shape) + M * np.asarray(X_f).reshape(shape)
    fused = fused.reshape(X_hat.shape)
    lat = codec.encode(fused)
    return (lat, fused) if return_trajectory else lat


def loss_weight(sigma_t, sigma_r) -> np.ndarray:
    sigma_t = np.asarray(sigma_t, dtype=np.float64)
    sigma_r = np.asarray(sigma_r, dtype=np.float64)
    if np.any(sigma_t <= sigma_r):
        raise ValueError("consistency loss needs sigma_t > sigma_r")
    return 1.0 / (sigma_t - sigma_r)


def consistency_loss(student, teacher, sigma_t, sigma_r, agent_mask: np.ndarray | None = None) -> ag.Tensor:
    """Mean over real agents of ``w(sigma_t, sigma_r) * ||student - teacher||_2``.

    ``student`` is a Tensor [B, A, L] (or [L]); ``teacher`` is treated as a constant.
    """
    student = ag.as_tensor(student)
    teacher = np.asarray(ag.as_tensor(teacher).data)  # never part of the graph
    w = loss_weight(sigma_t, sigma_r)
    dist = ag.l2_norm(student - ag.Tensor(teacher), axis=-1)
    if dist.data.ndim == 0:
        return dist * float(w)
    B = dist.shape[0]
    wmat = np.broadcast_to(w.reshape((B,) + (1,) * (dist.data.ndim - 1)), dist.shape)
    if agent_mask is None:
        agent_mask = np.ones(dist.shape, dtype=bool)
    n = max(int(agent_mask.sum()), 1)
    return (dist * ag.Tensor(np.where(agent_mask, wmat, 0.0) / n)).sum()


def select_modes(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """x [B, K, A, L], idx [B, A] -> [B, A, L]."""
    return np.take_along_axis(x, idx[:, None, :, None], axis=1)[:, 0]


def _pick(outputs_lat: np.ndarray, x0: np.ndarray, target: np.ndarray, codec: LatentCodec, space: str) -> np.ndarray:
    """Best-of-K per agent. outputs_lat [B, K, A, L] -> idx [B, A]."""
    B, K, A = outputs_lat.shape[:3]
    if space == "latent":
        return np.argmin(np.linalg.norm(outputs_lat - x0[:, None], axis=-1), axis=1)
    traj = codec.decode(outputs_lat).reshape(B, K, A, -1, 2)
    return best_of_k(traj, target.reshape(B, A, -1, 2), axis=1)


# --- training loop --------------------------------------------------------------


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    t: np.ndarray
    r: np.ndarray


@dataclass
class TrainState:
    params: dict
    ema: dict
    opt: AdamW
    tensors: dict
    step: int = 0


def new_state(dcfg: DenoiserConfig, tcfg: TrainConfig) -> TrainState:
    params = init_params(dcfg, np.random.default_rng([tcfg.seed, 1]))
    tensors = as_tensors(params, requires_grad=True)  # shares memory with params
    ema = {k: v.copy() for k, v in params.items()}
    opt = AdamW(list(tensors.values()), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    return TrainState(params, ema, opt, tensors)


def train_step(state: TrainState, batch, codec: LatentCodec, dcfg: DenoiserConfig, tcfg: TrainConfig,
               epoch: int, rng: np.random.Generator, curriculum: Curriculum, teacher_sched: TeacherScheduler) -> StepInfo:
    B, A = batch.target.shape[:2]
    T_f = batch.target.shape[-1] // 2
    N = curriculum.N(epoch)
    sched = build_sigmas(N, sigma_min=dcfg.sigma_min)
    t = build_pmf(sched).sample(rng, size=B)
    r = np.asarray(teacher_sched.index(t, epoch, N))
    sig_t, sig_r = sched.sigmas[t], sched.sigmas[r]

    x0 = codec.encode(batch.target)  # [B, A, L]
    x_t, eps = noisy_modes(x0, sig_t, tcfg.K, rng)
    if not tcfg.share_noise:
        eps = rng.standard_normal(eps.shape)
    x_r, _ = noisy_modes(x0, sig_r, tcfg.K, rng, eps=eps)
    mask = fusion_mask(tcfg.fusion, T_f, epoch, rng)

    # teacher (EMA weights, no gradient)
    if tcfg.fusion == "FF":
        target_lat = codec.encode(batch.target)  # full replacement: the teacher output is discarded
    else:
        with ag.no_grad():
            Pt = as_tensors(state.ema, requires_grad=False)
            ctx_t = encode_conditions(Pt, batch.cond, dcfg)
            out_t = denoise(Pt, x_r, np.maximum(sig_r, dcfg.sigma_min), ctx_t, dcfg).data
        # sigma_r = 0 is the left-padded grid point: the consistency function is the identity there
        out_t = np.where((r == 0)[:, None, None, None], x_r, out_t)
        k_t = _pick(out_t, x0, batch.target, codec, tcfg.best_of_k_space)
        target_lat = fuse_teacher(select_modes(out_t, k_t), batch.target, mask, codec)

    # student
    P = state.tensors
    ctx = encode_conditions(P, batch.cond, dcfg)
    out_s = denoise(P, x_t, sig_t, ctx, dcfg)
    k_s = _pick(out_s.data, x0, batch.target, codec, tcfg.best_of_k_space)
    onehot = np.zeros((B, tcfg.K, A, 1))
    np.put_along_axis(onehot, k_s[:, None, :, None], 1.0, axis=1)
    chosen = (out_s * ag.Tensor(onehot)).sum(axis=1)
    loss = consistency_loss(chosen, target_lat, sig_t, sig_r, batch.agent_mask)
    if not np.isfinite(loss.data):
        raise ag.NumericalError("consistency loss", stage="forward")
    grads = ag.grad(loss, list(P.values()))
    gnorm = clip_grad_norm(grads, tcfg.grad_clip) if tcfg.grad_clip > 0 else float("nan")
    state.opt.step(grads)
    ema_update(state.ema, state.params, tcfg.ema_alpha)
    state.step += 1
    return StepInfo(float(loss.data), float(gnorm), t, r)


@dataclass
class TrainResult:
    params: dict
    ema: dict
    history: list = field(default_factory=list)
    wall_time: float = 0.0


LOG_FIELDS = ("epoch", "N", "loss", "val_ADE_6", "val_FDE_6")


def _write_snapshot(path: Path, info: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(info, indent=2, default=lambda o: np.asarray(o).tolist()))


def checkpoint_groups(result_params: dict, ema: dict, codec: LatentCodec) -> dict:
    return {"student": result_params, "ema": ema, "codec": codec.arrays()}


def train(arrays: SceneArrays, codec: LatentCodec, dcfg: DenoiserConfig, tcfg: TrainConfig,
          val_arrays: SceneArrays | None = None, out_dir: str | Path | None = None,
          validate_fn=None, meta: dict | None = None) -> TrainResult:
    """Run the full loop. ``validate_fn(params, ema, val_arrays) -> (ADE_6, FDE_6)`` is optional.

    Writes ``train_log.csv`` and ``checkpoint.json`` (plus periodic
    ``checkpoint_eXXX.json``) to ``out_dir`` when given. A non-finite loss
    aborts with :class:`NumericalError` after dumping ``nan_snapshot.json``.
    """
    tcfg.validate(arrays.T_f)
    if codec.latent_dim != dcfg.latent_dim:
        raise ConfigError(f"codec latent dim {codec.latent_dim} != denoiser latent dim {dcfg.latent_dim}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = new_state(dcfg, tcfg)
    rng = np.random.default_rng([tcfg.seed, 2])
    curriculum = Curriculum(tcfg.epochs, tcfg.base_N)
    tsched = TeacherScheduler(tcfg.epochs, q=tcfg.q, k=tcfg.k, b=tcfg.b, mode=tcfg.schedule)
    history = []
    writer = fh = None
    if out is not None:
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
    t_start = time.perf_counter()
    try:
        for epoch in range(1, tcfg.epochs + 1):
            losses = []
            for idx in bucketed_batches(arrays.n_agents, tcfg.batch_size, rng):
                batch = make_batch(arrays, idx, codec)
                try:
                    info = train_step(state, batch, codec, dcfg, tcfg, epoch, rng, curriculum, tsched)
                except ag.NumericalError as exc:
                    if out is not None:
                        _write_snapshot(out / "nan_snapshot.json", {
                            "epoch": epoch, "step": state.step, "error": str(exc), "op": exc.op,
                            "stage": exc.stage, "scene_ids": arrays.scene_ids[idx],
                            "param_norms": {k: float(np.linalg.norm(v)) for k, v in state.params.items()},
                        })
                    log.error("numerical failure at epoch %d step %d: %s", epoch, state.step, exc)
                    raise
                losses.append(info.loss)
            row = {"epoch": epoch, "N": curriculum.N(epoch), "loss": float(np.mean(losses)),
                   "val_ADE_6": "", "val_FDE_6": ""}
            if val_arrays is not None and validate_fn is not None and tcfg.val_every and (
                    epoch % tcfg.val_every == 0 or epoch == tcfg.epochs):
                a6, f6 = validate_fn(state.params, state.ema, val_arrays)
                row["val_ADE_6"], row["val_FDE_6"] = a6, f6
            history.append(row)
            log.info("epoch %d N=%d loss=%.4f val_ADE_6=%s", epoch, row["N"], row["loss"], row["val_ADE_6"])
            if writer is not None:
                writer.writerow(row)
                fh.flush()
            if out is not None and tcfg.checkpoint_every and epoch % tcfg.checkpoint_every == 0 and epoch < tcfg.epochs:
                save_checkpoint(out / f"checkpoint_e{epoch:03d}.json",
                                checkpoint_groups(state.params, state.ema, codec),
                                meta={**(meta or {}), "epoch": epoch, "train": asdict(tcfg), "denoiser": asdict(dcfg)})
    finally:
        if fh is not None:
            fh.close()
    result = TrainResult(state.params, state.ema, history, time.perf_counter() - t_start)
    if out is not None:
        save_checkpoint(out / "checkpoint.json", checkpoint_groups(state.params, state.ema, codec),
                        meta={**(meta or {}), "epoch": tcfg.epochs, "train": asdict(tcfg), "denoiser": asdict(dcfg)})
    return result
