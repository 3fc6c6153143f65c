"""Single- and multi-step sampling from a trained consistency denoiser.

Each mode starts from ``x_N = sigma_max * z`` with ``z ~ N(0, I)``. A second
draw ``eps ~ N(0, I)`` is made once per mode and reused for every noise
re-injection (``resample_noise=True`` draws a fresh one per step instead).
With ``nfe`` evaluations the noise levels are ``sigma[tau_i]`` on the final
training grid with ``tau_i = round(i * N / nfe)`` for ``i = nfe .. 1``; no noise
is added after the last evaluation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ectraj import autograd as ag
from ectraj.errors import ConfigError
from ectraj.denoiser import CallCounter, DenoiserConfig, as_tensors, denoise, encode_conditions
from ectraj.features import SceneArrays, make_batch, residual_to_world, sequential_batches
from ectraj.latent import LatentCodec
from ectraj.metrics import PredictionSet, mode_probabilities
from ectraj.schedule import SIGMA_MAX, build_sigmas


@dataclass
class SamplerConfig:
    nfe: int = 1
    modes: int = 6
    seed: int = 0
    N_final: int = 40  # size of the sigma grid the tau indices refer to
    resample_noise: bool = False
    batch_size: int = 64
    weights: str = "student"  # "student" or "ema"

    def validate(self) -> None:
        if self.weights not in ("student", "ema"):
            raise ConfigError("sampler weights must be 'student' or 'ema'")
        if self.nfe < 1 or self.modes < 1:
            raise ConfigError("nfe and modes must be >= 1")
        if self.nfe > self.N_final:
            raise ConfigError(f"nfe={self.nfe} exceeds the {self.N_final}-level sigma grid")


def tau_indices(nfe: int, N: int) -> np.ndarray:
    """Grid indices ``tau_nfe > ... > tau_1`` followed by 0, as evaluated in order."""
    if nfe < 1 or nfe > N:
        raise ConfigError(f"need 1 <= nfe <= N, got nfe={nfe}, N={N}")
    taus = [int(round(i * N / nfe)) for i in range(nfe, 0, -1)]
    return np.array(taus + [0])


def sigma_levels(nfe: int, N: int) -> np.ndarray:
    sig = build_sigmas(N).sigmas
    return sig[tau_indices(nfe, N)]


def scene_noise(seed: int, scene_id: int, K: int, A: int, L: int, steps: int, resample: bool):
    """Initial latents and re-injection noise for one scene (independent of batching)."""
    rng = np.random.default_rng([seed, int(scene_id), 31337])
    z = rng.standard_normal((K, A, L))
    n_eps = max(steps - 1, 0) if resample else 1
    eps = rng.standard_normal((n_eps, K, A, L)) if n_eps else np.zeros((0, K, A, L))
    return z, eps


def run_chain(P, ctx, cfg: DenoiserConfig, x_init: np.ndarray, eps: np.ndarray, levels: np.ndarray,
              counter: CallCounter | None = None, resample: bool = False) -> np.ndarray:
    """The multistep loop on a batch. ``x_init`` [B, K, A, L] is already scaled by sigma_max.

    ``levels`` = sigmas to evaluate at followed by the trailing 0. ``eps`` is
    [B, K, A, L] (reused) or [B, steps-1, K, A, L] with ``resample``.
    """
    B = x_init.shape[0]
    x = x_init
    with ag.no_grad():
        for i in range(len(levels) - 1):
            x0 = denoise(P, x, np.full(B, levels[i]), ctx, cfg, counter).data
            nxt = levels[i + 1]
            if nxt > 0:
                e = eps[:, i] if resample else eps
                x = x0 + nxt * e
            else:
                x = x0
    return x


def sample_latents(params: dict, arrays: SceneArrays, idx: np.ndarray, codec: LatentCodec, cfg: DenoiserConfig,
                   scfg: SamplerConfig, counter: CallCounter | None = None) -> np.ndarray:
    """Latent samples [b, K, A, L] for the scenes ``idx`` (one batch)."""
    scfg.validate()
    if codec.latent_dim != cfg.latent_dim:
        raise ConfigError(f"codec latent dim {codec.latent_dim} != denoiser latent dim {cfg.latent_dim}")
    batch = make_batch(arrays, idx, codec)
    B, A = batch.target.shape[:2]
    K, L = scfg.modes, cfg.latent_dim
    levels = sigma_levels(scfg.nfe, scfg.N_final)
    z = np.zeros((B, K, A, L))
    n_eps = max(scfg.nfe - 1, 0) if scfg.resample_noise else 1
    eps = np.zeros((B, n_eps, K, A, L))
    for j, s in enumerate(idx):
        a = int(arrays.n_agents[s])
        zz, ee = scene_noise(scfg.seed, arrays.scene_ids[s], K, a, L, scfg.nfe, scfg.resample_noise)
        z[j, :, :a] = zz
        eps[j, :ee.shape[0], :, :a] = ee
    P = as_tensors(params, requires_grad=False)
    with ag.no_grad():
        ctx = encode_conditions(P, batch.cond, cfg)
    return run_chain(P, ctx, cfg, SIGMA_MAX * z, eps if scfg.resample_noise else eps[:, 0], levels,
                     counter, scfg.resample_noise)


def predict(params: dict, arrays: SceneArrays, codec: LatentCodec, cfg: DenoiserConfig, scfg: SamplerConfig,
            counter: CallCounter | None = None, use_prior_probs: bool = True) -> list[PredictionSet]:
    """Sample every scene of ``arrays`` and return world-frame prediction sets."""
    counter = counter if counter is not None else CallCounter()
    out: list[PredictionSet] = []
    for idx in sequential_batches(len(arrays), scfg.batch_size):
        t0 = time.perf_counter()
        lat = sample_latents(params, arrays, idx, codec, cfg, scfg, counter)
        world = residual_to_world(codec.decode(lat), arrays, idx)
        per_scene = (time.perf_counter() - t0) / len(idx)
        for j, s in enumerate(idx):
            a = int(arrays.n_agents[s])
            modes = world[j, :, :a]
            anchors = arrays.anchors_world[s, :a] if use_prior_probs else None
            scores = arrays.anchor_scores[s, :a] if use_prior_probs else None
            probs = mode_probabilities(modes, anchors, scores)
            out.append(PredictionSet(int(arrays.scene_ids[s]), modes, probs, nfe=scfg.nfe, wall_time=per_scene))
    return out


def count_nfe(counter: CallCounter, n_scenes: int, modes: int) -> int:
    """Denoiser evaluations per (scene, mode) recorded by ``counter``."""
    total = n_scenes * modes
    if total == 0 or counter.calls % total:
        raise ValueError(f"{counter.calls} calls do not divide evenly over {total} scene-modes")
    return counter.calls // total
