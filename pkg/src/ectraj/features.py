"""Scene -> padded numpy arrays, and batching for the denoiser.

The codec's trajectory space is the agent-frame future minus the agent's
constant-velocity rollout, flattened to ``T_f * 2`` values. Both fusion and
ADE are invariant to this shift because teacher output, student output and
ground truth all share the same per-agent rollout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ectraj.denoiser import Conditions
from ectraj.latent import LatentCodec
from ectraj.scenegen import (
    OracleConfig,
    PriorBundle,
    Scene,
    agent_frames,
    cv_baseline,
    encode_context,
    prior_oracle,
    to_agent_frame,
    to_world_frame,
)

MAX_AGENTS = 6


@dataclass
class SceneArrays:
    scene_ids: np.ndarray  # [n]
    n_agents: np.ndarray  # [n]
    agent_mask: np.ndarray  # [n, A]
    hist: np.ndarray  # [n, A, S, F_h]
    map_tokens: np.ndarray
    map_mask: np.ndarray
    nbr: np.ndarray
    nbr_mask: np.ndarray
    origins: np.ndarray  # [n, A, 2]
    rots: np.ndarray  # [n, A, 2, 2] world -> agent
    cv: np.ndarray  # [n, A, T_f, 2] agent frame
    target: np.ndarray  # [n, A, T_f*2] residual trajectory space
    gt_world: np.ndarray  # [n, A, T_f, 2]
    anchors: np.ndarray  # [n, A, Kp, T_f*2] residual trajectory space (Kp may be 0)
    anchor_scores: np.ndarray  # [n, A, Kp]
    prior_scores: np.ndarray  # [n, A, K_prior] (uniform when the oracle is off)
    anchors_world: np.ndarray  # [n, A, Kp, T_f, 2]

    def __len__(self) -> int:
        return len(self.scene_ids)

    @property
    def T_f(self) -> int:
        return self.cv.shape[2]


def build_arrays(scenes: Sequence[Scene], oracle: OracleConfig, seed: int = 0, max_agents: int = MAX_AGENTS) -> SceneArrays:
    n = len(scenes)
    if n == 0:
        raise ValueError("no scenes")
    T_f = scenes[0].futures.shape[1]
    first_ctx = encode_context(scenes[0])
    S, F_h = first_ctx.hist_tokens.shape[1:]
    P, F_m = first_ctx.map_tokens.shape[1:]
    F_n = first_ctx.nbr_tokens.shape[2]
    Kp = oracle.K_prior if oracle.enabled else 0
    A = max_agents
    out = SceneArrays(
        scene_ids=np.zeros(n, dtype=np.int64),
        n_agents=np.zeros(n, dtype=np.int64),
        agent_mask=np.zeros((n, A), dtype=bool),
        hist=np.zeros((n, A, S, F_h)),
        map_tokens=np.zeros((n, A, P, F_m)),
        map_mask=np.zeros((n, A, P), dtype=bool),
        nbr=np.zeros((n, A, A, F_n)),
        nbr_mask=np.zeros((n, A, A), dtype=bool),
        origins=np.zeros((n, A, 2)),
        rots=np.tile(np.eye(2), (n, A, 1, 1)),
        cv=np.zeros((n, A, T_f, 2)),
        target=np.zeros((n, A, T_f * 2)),
        gt_world=np.zeros((n, A, T_f, 2)),
        anchors=np.zeros((n, A, Kp, T_f * 2)),
        anchor_scores=np.zeros((n, A, Kp)),
        prior_scores=np.zeros((n, A, oracle.K_prior)),
        anchors_world=np.zeros((n, A, Kp, T_f, 2)),
    )
    for b, sc in enumerate(scenes):
        a = sc.n_agents
        if a > A:
            raise ValueError(f"scene {sc.scene_id} has {a} agents > {A}")
        ctx = first_ctx if b == 0 else encode_context(sc)
        prior = prior_oracle(sc, oracle, seed=seed, context=ctx)
        origins, rots, _ = agent_frames(sc)
        cv = cv_baseline(sc, T_f)
        out.scene_ids[b] = sc.scene_id
        out.n_agents[b] = a
        out.agent_mask[b, :a] = ctx.valid
        out.hist[b, :a] = ctx.hist_tokens
        out.map_tokens[b, :a] = ctx.map_tokens
        out.map_mask[b, :a] = ctx.map_mask
        out.nbr[b, :a, :a] = ctx.nbr_tokens
        out.nbr_mask[b, :a, :a] = ctx.nbr_mask
        out.origins[b, :a] = origins
        out.rots[b, :a] = rots
        out.cv[b, :a] = cv
        out.gt_world[b, :a] = sc.futures
        fut_local = np.stack([to_agent_frame(sc.futures[i], origins[i], rots[i]) for i in range(a)])
        out.target[b, :a] = (fut_local - cv).reshape(a, -1)
        out.prior_scores[b, :a] = prior.scores
        if Kp:
            for i in range(a):
                loc = to_agent_frame(prior.anchors[i], origins[i], rots[i])
                out.anchors[b, i] = (loc - cv[i]).reshape(Kp, -1)
            out.anchor_scores[b, :a] = prior.scores
            out.anchors_world[b, :a] = prior.anchors
    return out


def residual_to_world(res: np.ndarray, arrays: SceneArrays, idx: np.ndarray) -> np.ndarray:
    """Residual trajectories [b, K, A, T_f*2] of scenes ``idx`` -> world [b, K, A, T_f, 2]."""
    b, K, A = res.shape[:3]
    T_f = arrays.T_f
    loc = res.reshape(b, K, A, T_f, 2) + arrays.cv[idx, None, :A]
    rots = arrays.rots[idx, None, :A]  # [b, 1, A, 2, 2]
    # to_agent_frame is (p - o) @ R^T, so the inverse is p_local @ R + o
    return np.matmul(loc, rots) + arrays.origins[idx, None, :A, None, :]


@dataclass
class Batch:
    idx: np.ndarray
    cond: Conditions
    target: np.ndarray  # [B, A, T_f*2]
    agent_mask: np.ndarray  # [B, A]


def make_batch(arrays: SceneArrays, idx: np.ndarray, codec: LatentCodec) -> Batch:
    idx = np.asarray(idx)
    A = int(arrays.n_agents[idx].max())
    hist = arrays.hist[idx, :A]
    B = len(idx)
    anchors = arrays.anchors[idx, :A]
    if anchors.shape[2]:
        anchor_lat = codec.encode(anchors)
        with np.errstate(divide="ignore"):
            bias = np.log(np.maximum(arrays.anchor_scores[idx, :A], 1e-12))
    else:
        anchor_lat = np.zeros((B, A, 0, codec.latent_dim))
        bias = np.zeros((B, A, 0))
    cond = Conditions(
        hist=hist,
        hist_flat=hist.reshape(B, A, -1),
        map_tokens=arrays.map_tokens[idx, :A],
        map_mask=arrays.map_mask[idx, :A],
        nbr=arrays.nbr[idx, :A, :A],
        nbr_mask=arrays.nbr_mask[idx, :A, :A],
        agent_mask=arrays.agent_mask[idx, :A],
        anchors=anchor_lat,
        anchor_bias=bias,
    )
    return Batch(idx, cond, arrays.target[idx, :A], arrays.agent_mask[idx, :A])


def bucketed_batches(n_agents: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle scenes, group by agent count (less padding), shuffle batch order."""
    batches = []
    for a in np.unique(n_agents):
        ids = np.nonzero(n_agents == a)[0]
        ids = ids[rng.permutation(len(ids))]
        batches.extend(ids[k:k + batch_size] for k in range(0, len(ids), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def sequential_batches(n: int, batch_size: int) -> list[np.ndarray]:
    return [np.arange(k, min(n, k + batch_size)) for k in range(0, n, batch_size)]


def world_to_residual(traj_world: np.ndarray, origin: np.ndarray, rot: np.ndarray, cv: np.ndarray) -> np.ndarray:
    return (to_agent_frame(traj_world, origin, rot) - cv).reshape(-1)


def residual_to_world_single(res: np.ndarray, origin: np.ndarray, rot: np.ndarray, cv: np.ndarray) -> np.ndarray:
    return to_world_frame(res.reshape(cv.shape) + cv, origin, rot)
