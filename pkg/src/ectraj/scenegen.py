"""Synthetic four-way intersection scenes and a prior oracle.

Each scene places 2-6 vehicles on the approaches of a right-hand-traffic
intersection. Every vehicle follows one intent (straight, left, right or
stop) along an arc-length parametrized path with a smooth speed profile.
The whole layout is then rotated and translated at random, so every
learned component has to work in agent-centric coordinates.

The prior oracle plays the part of a pretrained marginal predictor. It
returns one anchor per intent, plus speed variants, with softmax scores;
the anchor of the true intent is the ground-truth future with bounded
noise added. An ``accuracy`` knob controls how often that anchor gets the
top score.
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ectraj.errors import ConfigError

INTENTS = ("straight", "left", "right", "stop")
SCENE_FORMAT_VERSION = 1


class SceneConfigError(ConfigError):
    pass


@dataclass
class SceneConfig:
    min_agents: int = 2
    max_agents: int = 6
    T_h: int = 20
    T_f: int = 30
    dt: float = 0.1
    max_speed: float = 15.0
    speed_range: tuple[float, float] = (4.0, 12.0)
    turn_speed_range: tuple[float, float] = (4.0, 7.0)
    lane_width: float = 3.5
    box_half: float = 7.0
    intents: tuple[str, ...] = INTENTS
    intent_probs: tuple[float, ...] | None = (0.4, 0.2, 0.2, 0.2)
    points_per_polyline: int = 10
    lane_length: float = 40.0

    def validate(self) -> None:
        if not self.intents:
            raise SceneConfigError("at least one intent is required")
        unknown = set(self.intents) - set(INTENTS)
        if unknown:
            raise SceneConfigError(f"unknown intents {sorted(unknown)}")
        if self.intent_probs is not None:
            p = np.asarray(self.intent_probs, dtype=float)
            if len(p) != len(self.intents) or np.any(p < 0) or p.sum() <= 0:
                raise SceneConfigError("intent_probs must be non-negative, one per intent")
        if not 2 <= self.min_agents <= self.max_agents <= 6:
            raise SceneConfigError("agent count must satisfy 2 <= min <= max <= 6")
        if self.T_h < 2 or self.T_f < 2 or self.dt <= 0:
            raise SceneConfigError("need T_h >= 2, T_f >= 2 and dt > 0")
        if self.speed_range[1] > self.max_speed:
            raise SceneConfigError("speed_range exceeds max_speed")


@dataclass
class Scene:
    scene_id: int
    histories: np.ndarray  # [A, T_h, 2] world meters
    futures: np.ndarray  # [A, T_f, 2]
    headings: np.ndarray  # [A] heading at the last observed step (rad)
    map_polylines: np.ndarray  # [N_m, D_p, 5]: x, y, cos, sin, segment length
    intents: list[str]
    dt: float = 0.1
    history_mask: np.ndarray | None = None  # [A, T_h] bool; None = all observed
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.history_mask is None:
            self.history_mask = np.ones(self.histories.shape[:2], dtype=bool)

    @property
    def n_agents(self) -> int:
        return len(self.histories)


@dataclass
class PriorBundle:
    context: np.ndarray  # [A, F] fixed-width context vector per agent
    anchors: np.ndarray  # [A, K_anchor, T_f, 2] world meters (K_anchor = 0 when disabled)
    scores: np.ndarray  # [A, K_prior], rows sum to 1
    top_intent: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# geometry


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def _densify(points: np.ndarray, step: float = 0.05) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    out = [points[:1]]
    for a, b, L in zip(points[:-1], points[1:], seg):
        n = max(1, int(np.ceil(L / step)))
        u = np.arange(1, n + 1)[:, None] / n
        out.append(a + u * (b - a))
    return np.concatenate(out)


def _arc(center, radius, a0, a1, n=60) -> np.ndarray:
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang), center[1] + radius * np.sin(ang)], axis=1)


def local_path(intent: str, lane_width: float, box_half: float, far: float = 120.0) -> np.ndarray:
    """Centerline in the approach frame (heading +x, entry at x = -box_half)."""
    w2, B = lane_width / 2.0, box_half
    start = np.array([[-B - far, -w2], [-B, -w2]])
    if intent in ("straight", "stop"):
        pts = np.array([[-B - far, -w2], [B + far, -w2]])
    elif intent == "right":
        R = B - w2
        pts = np.concatenate([start, _arc((-B, -B), R, np.pi / 2, 0.0)[1:], [[-w2, -B - far]]])
    elif intent == "left":
        R = B + w2
        pts = np.concatenate([start, _arc((-B, B), R, -np.pi / 2, 0.0)[1:], [[w2, B + far]]])
    else:
        raise SceneConfigError(f"unknown intent {intent!r}")
    return _densify(pts)


class _Path:
    def __init__(self, pts: np.ndarray):
        self.pts = pts
        self.s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])

    def at(self, s: np.ndarray) -> np.ndarray:
        s = np.clip(s, 0.0, self.s[-1])
        return np.stack([np.interp(s, self.s, self.pts[:, 0]), np.interp(s, self.s, self.pts[:, 1])], axis=-1)


def _positions_from_speed(v: np.ndarray, k_now: int, dt: float) -> np.ndarray:
    """Arc length relative to the current step, trapezoid-integrated."""
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])
    return cum - cum[k_now]


def _map_polylines(cfg: SceneConfig) -> np.ndarray:
    w, B, L, n = cfg.lane_width, cfg.box_half, cfg.lane_length, cfg.points_per_polyline
    local = []
    local.append(np.stack([np.linspace(-B - L, -B, n), np.full(n, -w / 2)], 1))  # incoming lane
    local.append(np.stack([np.linspace(-B, -B - L, n), np.full(n, w / 2)], 1))  # outgoing lane
    local.append(np.stack([np.linspace(-B - L, -B, n), np.full(n, -w)], 1))  # right edge
    local.append(np.stack([np.linspace(-B - L, -B, n), np.full(n, w)], 1))  # left edge
    local.append(np.stack([np.linspace(-B, B, n), np.full(n, -w / 2)], 1))  # straight connector
    local.append(_arc((-B, -B), B - w / 2, np.pi / 2, 0.0, n))  # right connector
    local.append(_arc((-B, B), B + w / 2, -np.pi / 2, 0.0, n))  # left connector
    polys = []
    for arm in range(4):
        R = _rot(arm * np.pi / 2)
        polys.extend(p @ R.T for p in local)
    return np.stack(polys)


def _polyline_attributes(points: np.ndarray) -> np.ndarray:
    d = np.diff(points, axis=0)
    d = np.concatenate([d, d[-1:]], axis=0)
    L = np.linalg.norm(d, axis=1)
    safe = np.where(L > 0, L, 1.0)
    return np.concatenate([points, d / safe[:, None], L[:, None]], axis=1)


def _transform_polylines(polys: np.ndarray, R: np.ndarray, T: np.ndarray) -> np.ndarray:
    pts = polys @ R.T + T
    return np.stack([_polyline_attributes(p) for p in pts])


# ---------------------------------------------------------------------------
# agents


def _speed_profile(intent: str, rng: np.random.Generator, cfg: SceneConfig, v_cap: float):
    """Speed at every step (history then future) and the current speed."""
    T = cfg.T_h + cfg.T_f
    k_now = cfg.T_h - 1
    tau = (np.arange(T) - k_now) * cfg.dt
    if intent == "stop":
        v0 = rng.uniform(2.0, min(8.0, v_cap))
        t_stop = rng.uniform(-0.8 * cfg.T_h * cfg.dt, -0.2 * cfg.T_h * cfg.dt)
        t_start = -cfg.T_h * cfg.dt
        decel = v0 / (t_stop - t_start)
        v = np.clip(decel * (t_stop - tau), 0.0, None)
        creep = rng.uniform(0.0, 0.1)
        v[tau > 0] = creep
        return v, 0.0
    v_now = rng.uniform(cfg.speed_range[0], min(cfg.speed_range[1], v_cap))
    a_h = rng.uniform(-1.0, 1.0)
    v = v_now + a_h * tau
    fut = tau > 0
    if intent == "straight":
        a_f = rng.uniform(-1.5, 1.5)
        v[fut] = v_now + a_f * tau[fut]
    else:
        v_turn = min(v_now, rng.uniform(*cfg.turn_speed_range))
        ramp = np.clip(tau[fut] / 1.5, 0.0, 1.0)
        v[fut] = v_now + (v_turn - v_now) * ramp
    v = np.clip(v, 0.3, min(cfg.max_speed, v_cap + 2.0))
    return v, float(v[k_now])


@functools.lru_cache(maxsize=64)
def _cached_path(intent: str, lane_width: float, box_half: float) -> tuple[_Path, float]:
    path = _Path(local_path(intent, lane_width, box_half))
    s_entry = path.s[np.argmin(np.abs(path.pts[:, 0] + box_half) + np.abs(path.pts[:, 1] + lane_width / 2))]
    return path, float(s_entry)


def _rollout(intent: str, lane_width: float, box_half: float, offset: float, dist: float, v: np.ndarray, k_now: int, dt: float) -> np.ndarray:
    """Positions along ``intent``'s path for an agent ``dist`` meters before the entry at step ``k_now``."""
    path, s_entry = _cached_path(intent, float(lane_width), float(box_half))
    s = s_entry - dist + _positions_from_speed(v, k_now, dt)
    return path.at(s) + np.array([0.0, offset])


def generate_scene(seed: int, config: SceneConfig | None = None, scene_id: int | None = None) -> Scene:
    """Deterministic scene for ``(seed, scene_id)``."""
    cfg = config or SceneConfig()
    cfg.validate()
    sid = int(seed if scene_id is None else scene_id)
    rng = np.random.default_rng([int(seed), sid, 7919])
    n_agents = int(rng.integers(cfg.min_agents, cfg.max_agents + 1))
    probs = None
    if cfg.intent_probs is not None:
        probs = np.asarray(cfg.intent_probs, dtype=float)
        probs = probs / probs.sum()
    k_now = cfg.T_h - 1

    theta = rng.uniform(0.0, 2 * np.pi)
    R = _rot(theta)
    T = rng.uniform(-100.0, 100.0, size=2)

    arms = rng.integers(0, 4, size=n_agents)
    leaders: dict[int, dict] = {}
    hist, fut, heads, intents, agent_meta = [], [], [], [], []
    for i in range(n_agents):
        arm = int(arms[i])
        lead = leaders.get(arm)
        intent = str(cfg.intents[rng.choice(len(cfg.intents), p=probs)])
        v_cap = cfg.speed_range[1]
        if lead is not None:
            if lead["intent"] == "stop":
                intent = "stop"
            v_cap = max(cfg.speed_range[0], lead["v_now"])
        v, v_now = _speed_profile(intent, rng, cfg, v_cap)
        if intent == "stop":
            gap = 1.0 if lead is None else lead["dist"] + rng.uniform(6.0, 9.0)
            dist = gap + rng.uniform(0.0, 4.0) if lead is None else gap
        else:
            dist = rng.uniform(0.0, 18.0) if lead is None else lead["dist"] + rng.uniform(14.0, 20.0)
        offset = float(np.clip(rng.normal(0.0, 0.15), -0.4, 0.4))
        local = _rollout(intent, cfg.lane_width, cfg.box_half, offset, dist, v, k_now, cfg.dt)
        Ra = _rot(arm * np.pi / 2)
        world = local @ (R @ Ra).T + T
        hist.append(world[: cfg.T_h])
        fut.append(world[cfg.T_h:])
        d = local[min(k_now + 1, len(local) - 1)] - local[k_now - 1]
        heading_local = np.arctan2(d[1], d[0]) if np.linalg.norm(d) > 1e-6 else 0.0
        heads.append(float(np.arctan2(np.sin(theta + arm * np.pi / 2 + heading_local),
                                      np.cos(theta + arm * np.pi / 2 + heading_local))))
        intents.append(intent)
        agent_meta.append({"arm": arm, "offset": offset, "dist": float(dist), "v_now": float(v_now)})
        if lead is None:
            leaders[arm] = {"intent": intent, "v_now": v_now, "dist": dist}
        else:
            lead["dist"] = dist
            lead["v_now"] = v_now

    polys = _transform_polylines(_map_polylines(cfg), R, T)
    meta = {
        "seed": int(seed),
        "rotation": float(theta),
        "translation": T.tolist(),
        "lane_width": cfg.lane_width,
        "box_half": cfg.box_half,
        "agents": agent_meta,
    }
    return Scene(
        scene_id=sid,
        histories=np.stack(hist),
        futures=np.stack(fut),
        headings=np.array(heads),
        map_polylines=polys,
        intents=intents,
        dt=cfg.dt,
        meta=meta,
    )


def generate_dataset(seed: int, count: int, config: SceneConfig | None = None, start_id: int = 0) -> list[Scene]:
    return [generate_scene(seed, config, scene_id=start_id + i) for i in range(count)]


def make_splits(seed: int, n_train: int, n_val: int, n_test: int, config: SceneConfig | None = None) -> dict[str, list[Scene]]:
    """Disjoint id ranges: train [0, n_train), then val, then test."""
    return {
        "train": generate_dataset(seed, n_train, config, 0),
        "val": generate_dataset(seed, n_val, config, n_train),
        "test": generate_dataset(seed, n_test, config, n_train + n_val),
    }


# ---------------------------------------------------------------------------
# agent frames and context features

HIST_SEGMENTS = 4
MAP_TOKENS = 8
HIST_FEAT = 3
NBR_REL_FEAT = 6


def agent_frames(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Origins [A, 2], world-to-agent rotations [A, 2, 2] and validity [A]."""
    A = scene.n_agents
    origins = np.zeros((A, 2))
    rots = np.tile(np.eye(2), (A, 1, 1))
    valid = scene.history_mask.any(axis=1)
    for i in range(A):
        if not valid[i]:
            continue
        last = np.nonzero(scene.history_mask[i])[0][-1]
        origins[i] = scene.histories[i, last]
        rots[i] = _rot(-scene.headings[i])
    return origins, rots, valid


def to_agent_frame(points: np.ndarray, origin: np.ndarray, rot: np.ndarray) -> np.ndarray:
    return (points - origin) @ rot.T


def to_world_frame(points: np.ndarray, origin: np.ndarray, rot: np.ndarray) -> np.ndarray:
    return points @ rot + origin


def cv_baseline(scene: Scene, T_f: int | None = None) -> np.ndarray:
    """Constant-velocity rollout in each agent frame, [A, T_f, 2]."""
    T_f = T_f or scene.futures.shape[1]
    origins, rots, valid = agent_frames(scene)
    out = np.zeros((scene.n_agents, T_f, 2))
    steps = np.arange(1, T_f + 1)[:, None]
    for i in range(scene.n_agents):
        idx = np.nonzero(scene.history_mask[i])[0]
        if len(idx) < 2 or idx[-1] - idx[-2] != 1:
            continue
        vel = (scene.histories[i, idx[-1]] - scene.histories[i, idx[-2]]) @ rots[i].T
        out[i] = steps * vel
    return out


@dataclass
class SceneContext:
    """Fixed (non-learned) per-agent features in agent-centric coordinates."""

    hist_tokens: np.ndarray  # [A, S, (T_h/S)*3]
    map_tokens: np.ndarray  # [A, P, D_p*5]
    map_mask: np.ndarray  # [A, P]
    nbr_tokens: np.ndarray  # [A, A, 6 + hist flat]
    nbr_mask: np.ndarray  # [A, A]
    valid: np.ndarray  # [A]

    def vector(self) -> np.ndarray:
        """One fixed-width vector per agent (all features flattened)."""
        A = len(self.valid)
        return np.concatenate(
            [
                self.valid[:, None].astype(float),
                self.hist_tokens.reshape(A, -1),
                (self.map_tokens * self.map_mask[..., None]).reshape(A, -1),
                (self.nbr_tokens * self.nbr_mask[..., None]).sum(axis=1),
                self.nbr_mask.sum(axis=1, keepdims=True).astype(float),
            ],
            axis=1,
        )


HIST_SCALE = 10.0
MAP_SCALE = 20.0


def _hist_features(scene: Scene, origins, rots, valid) -> np.ndarray:
    A, T_h = scene.histories.shape[:2]
    feats = np.zeros((A, T_h, HIST_FEAT))
    for i in range(A):
        if not valid[i]:
            continue
        m = scene.history_mask[i]
        loc = to_agent_frame(scene.histories[i], origins[i], rots[i]) / HIST_SCALE
        feats[i, :, :2] = np.where(m[:, None], loc, 0.0)
        feats[i, :, 2] = m
    return feats


def encode_context(scene: Scene, n_map_tokens: int = MAP_TOKENS, n_segments: int = HIST_SEGMENTS) -> SceneContext:
    """Agent-centric features; agents without observed history get all-zero padding."""
    A, T_h = scene.histories.shape[:2]
    if T_h % n_segments:
        raise ValueError(f"T_h={T_h} not divisible into {n_segments} segments")
    origins, rots, valid = agent_frames(scene)
    hist = _hist_features(scene, origins, rots, valid)
    hist_tokens = hist.reshape(A, n_segments, -1)

    polys = scene.map_polylines
    Pn, Dp = polys.shape[:2]
    P = min(n_map_tokens, Pn)
    map_tokens = np.zeros((A, n_map_tokens, Dp * 5))
    map_mask = np.zeros((A, n_map_tokens), dtype=bool)
    for i in range(A):
        if not valid[i]:
            continue
        d = np.linalg.norm(polys[:, :, :2] - origins[i], axis=-1).min(axis=1)
        # stable order: distance, then polyline index
        near = np.lexsort((np.arange(Pn), np.round(d, 9)))[:P]
        pts = to_agent_frame(polys[near, :, :2], origins[i], rots[i]) / MAP_SCALE
        dirs = polys[near, :, 2:4] @ rots[i].T
        feat = np.concatenate([pts, dirs, polys[near, :, 4:5] / 5.0], axis=-1)
        map_tokens[i, :P] = feat.reshape(P, -1)
        map_mask[i, :P] = True

    hist_flat = hist.reshape(A, -1)
    nbr_tokens = np.zeros((A, A, NBR_REL_FEAT + hist_flat.shape[1]))
    nbr_mask = np.zeros((A, A), dtype=bool)
    vel = np.zeros((A, 2))
    for j in range(A):
        idx = np.nonzero(scene.history_mask[j])[0]
        if len(idx) >= 2 and idx[-1] - idx[-2] == 1:
            vel[j] = (scene.histories[j, idx[-1]] - scene.histories[j, idx[-2]]) / scene.dt
    for i in range(A):
        if not valid[i]:
            continue
        for j in range(A):
            if j == i or not valid[j]:
                continue
            rel = to_agent_frame(origins[j], origins[i], rots[i]) / MAP_SCALE
            dh = scene.headings[j] - scene.headings[i]
            v_rel = (vel[j] @ rots[i].T) / HIST_SCALE
            nbr_tokens[i, j, :NBR_REL_FEAT] = [rel[0], rel[1], np.cos(dh), np.sin(dh), v_rel[0], v_rel[1]]
            nbr_tokens[i, j, NBR_REL_FEAT:] = hist_flat[j]
            nbr_mask[i, j] = True
    return SceneContext(hist_tokens, map_tokens, map_mask, nbr_tokens, nbr_mask, valid)


# ---------------------------------------------------------------------------
# prior oracle


@dataclass
class OracleConfig:
    enabled: bool = True
    K_prior: int = 6
    noise_level: float = 1.0
    accuracy: float = 0.7


def _clamp_steps(traj: np.ndarray, start: np.ndarray, max_step: float) -> np.ndarray:
    steps = np.diff(np.concatenate([start[None], traj]), axis=0)
    if np.all(np.linalg.norm(steps, axis=1) <= max_step):
        return traj
    out = np.empty_like(traj)
    prev = start
    for k in range(len(traj)):
        d = traj[k] - prev
        n = np.linalg.norm(d)
        if n > max_step:
            d = d * (max_step / n)
        out[k] = prev + d
        prev = out[k]
    return out


def _template(scene: Scene, i: int, intent: str, speed_scale: float, T_f: int) -> np.ndarray:
    """Constant-speed (or braking) rollout of ``intent`` from agent i's state, world frame."""
    meta = scene.meta["agents"][i]
    B, w = scene.meta["box_half"], scene.meta["lane_width"]
    dt = scene.dt
    v_now = meta["v_now"] * speed_scale
    tau = np.arange(T_f + 1) * dt
    if intent == "stop":
        dist_to_line = max(0.0, meta["dist"] - 1.0)
        decel = max(3.0, v_now**2 / (2 * dist_to_line)) if dist_to_line > 0 and v_now > 0 else 3.0
        v = np.clip(v_now - decel * tau, 0.0, None)
    elif meta["v_now"] < 0.5:
        v = np.clip(2.0 * speed_scale * tau, 0.0, None)
    else:
        v = np.full_like(tau, v_now)
    local = _rollout(intent if intent != "stop" else "straight", w, B, meta["offset"], meta["dist"], v, 0, dt)[1:]
    theta, T = scene.meta["rotation"], np.asarray(scene.meta["translation"])
    Rw = _rot(theta + meta["arm"] * np.pi / 2)
    return local @ Rw.T + T


def prior_oracle(scene: Scene, config: OracleConfig | None = None, seed: int = 0, context: SceneContext | None = None) -> PriorBundle:
    cfg = config or OracleConfig()
    if cfg.K_prior < 1:
        raise ValueError("K_prior must be >= 1")
    A, T_f = scene.futures.shape[:2]
    ctx = (context or encode_context(scene)).vector()
    if not cfg.enabled:
        return PriorBundle(
            context=ctx,
            anchors=np.zeros((A, 0, T_f, 2)),
            scores=np.full((A, cfg.K_prior), 1.0 / cfg.K_prior),
        )
    rng = np.random.default_rng([int(seed), int(scene.scene_id), 104729])
    max_step = 15.0 * scene.dt
    n_int = len(INTENTS)
    anchors = np.zeros((A, cfg.K_prior, T_f, 2))
    scores = np.zeros((A, cfg.K_prior))
    tops = []
    for i in range(A):
        true = INTENTS.index(scene.intents[i])
        logits = rng.normal(0.0, 0.5, n_int)
        if rng.random() < cfg.accuracy or n_int == 1:
            top = true
        else:
            top = int(rng.choice([k for k in range(n_int) if k != true]))
        others = np.delete(logits, top)
        logits[top] = others.max() + 1.0 + rng.uniform(0.0, 1.0)
        cands, cand_logits = [], []
        for k, intent in enumerate(INTENTS):
            cands.append(scene.futures[i].copy() if k == true else _template(scene, i, intent, 1.0, T_f))
            cand_logits.append(logits[k])
        variant_scales = [0.7, 1.3, 0.5, 1.5, 0.85, 1.15]
        for m in range(max(0, cfg.K_prior - n_int)):
            s = variant_scales[m % len(variant_scales)]
            cands.append(_template(scene, i, INTENTS[top], s, T_f))
            cand_logits.append(logits[top] - 1.0 - 0.1 * m)
        order = np.argsort(-np.asarray(cand_logits), kind="stable")[: cfg.K_prior]
        start = scene.histories[i, -1]
        for slot, c in enumerate(order):
            traj = cands[c]
            if cfg.noise_level > 0:
                u = rng.uniform(-1.0, 1.0, size=2)
                ramp = np.arange(1, T_f + 1)[:, None] / T_f
                traj = traj + cfg.noise_level * ramp * u
            anchors[i, slot] = _clamp_steps(traj, start, max_step)
        sel = np.asarray(cand_logits)[order]
        e = np.exp(sel - sel.max())
        scores[i] = e / e.sum()
        tops.append(INTENTS[top])
    return PriorBundle(context=ctx, anchors=anchors, scores=scores, top_intent=tops)


# ---------------------------------------------------------------------------
# persistence (JSON lines, one scene per line)


def scene_to_record(scene: Scene, prior: PriorBundle | None = None) -> dict:
    rec = {
        "format_version": SCENE_FORMAT_VERSION,
        "scene_id": scene.scene_id,
        "dt": scene.dt,
        "intents": list(scene.intents),
        "histories": scene.histories.tolist(),
        "history_mask": scene.history_mask.astype(int).tolist(),
        "futures": scene.futures.tolist(),
        "headings": scene.headings.tolist(),
        "map_polylines": scene.map_polylines.tolist(),
        "meta": scene.meta,
    }
    if prior is not None:
        rec["prior"] = {"anchors": prior.anchors.tolist(), "scores": prior.scores.tolist()}
    return rec


def scene_from_record(rec: dict) -> Scene:
    if rec.get("format_version") != SCENE_FORMAT_VERSION:
        raise ValueError(f"unsupported scene format_version {rec.get('format_version')!r}")
    return Scene(
        scene_id=int(rec["scene_id"]),
        histories=np.asarray(rec["histories"], dtype=float),
        futures=np.asarray(rec["futures"], dtype=float),
        headings=np.asarray(rec["headings"], dtype=float),
        map_polylines=np.asarray(rec["map_polylines"], dtype=float),
        intents=list(rec["intents"]),
        dt=float(rec["dt"]),
        history_mask=np.asarray(rec["history_mask"], dtype=bool),
        meta=rec.get("meta", {}),
    )


def save_scenes(path, scenes: Iterable[Scene], priors: Sequence[PriorBundle] | None = None) -> None:
    with open(path, "w") as fh:
        for k, sc in enumerate(scenes):
            fh.write(json.dumps(scene_to_record(sc, None if priors is None else priors[k])) + "\n")


def load_scenes(path) -> list[Scene]:
    return [scene_from_record(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def config_dict(cfg: SceneConfig) -> dict:
    return asdict(cfg)
