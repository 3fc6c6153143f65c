"""Multi-modal trajectory metrics: ADE/FDE best-of-K, brier-FDE, miss and collision rates.

Conventions
-----------
* Modes are ranked by probability per agent; ``ADE_K`` / ``FDE_K`` take the
  minimum over the ``K`` most probable modes, each minimized independently.
  ``K = 1`` is therefore the most probable mode.
* brier-FDE uses the minimum-FDE mode; the penalty is ``(1 - p)**2``
  (``"standard"``) or ``1 - p**2`` (``"literal"``).
* Miss rate and brier-FDE are computed per agent and averaged; a best FDE of
  exactly the threshold counts as a hit.
* Collision rate is per scene, on the joint prediction made of every agent's
  most probable mode; scenes with fewer than two agents are left out of the
  denominator and counted separately.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MISS_THRESHOLD = 2.0
COLLISION_THRESHOLD = 1.0
BRIER_FORMS = ("standard", "literal")


@dataclass
class PredictionSet:
    """Predictions for one scene.

    ``modes`` is [K, A, T_f, 2] in meters (world frame); ``probs`` is [K, A]
    and sums to one over modes for every agent.
    """

    scene_id: int
    modes: np.ndarray
    probs: np.ndarray
    nfe: int = 1
    wall_time: float = 0.0

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.modes.ndim != 4 or self.modes.shape[-1] != 2:
            raise ValueError(f"modes must be [K, A, T, 2], got {self.modes.shape}")
        if self.probs.shape != self.modes.shape[:2]:
            raise ValueError(f"probs shape {self.probs.shape} does not match modes {self.modes.shape[:2]}")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=0) - 1.0) > 1e-9):
            raise ValueError("mode probabilities must be non-negative and sum to 1 per agent")

    @property
    def K(self) -> int:
        return self.modes.shape[0]

    @property
    def n_agents(self) -> int:
        return self.modes.shape[1]


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape[-2] != gt.shape[-2]:
        raise ValueError(f"waypoint counts differ: {pred.shape[-2]} vs {gt.shape[-2]}")
    return pred, gt


def ade(pred, gt) -> np.ndarray:
    """Mean Euclidean distance over waypoints; broadcasts over leading axes."""
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def fde(pred, gt) -> np.ndarray:
    """Distance at the final waypoint."""
    pred, gt = _check_pair(pred, gt)
    return np.linalg.norm(pred[..., -1, :] - gt[..., -1, :], axis=-1)


def min_over_modes(errors, K: int, order: np.ndarray | None = None) -> np.ndarray:
    """Minimum of ``errors`` ([M, ...]) over the first K modes of ``order``.

    ``order`` ([M, ...] integer ranks along axis 0, e.g. from sorting by
    probability) defaults to the stored mode order.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if K < 1:
        raise ValueError("K must be at least 1")
    if order is not None:
        errors = np.take_along_axis(errors, order, axis=0)
    return errors[:K].min(axis=0)


def probability_order(probs: np.ndarray) -> np.ndarray:
    """Mode indices sorted by descending probability (stable, ties keep mode order)."""
    return np.argsort(-np.asarray(probs), axis=0, kind="stable")


def brier_penalty(p, form: str = "standard"):
    p = np.asarray(p, dtype=np.float64)
    if form == "standard":
        return (1.0 - p) ** 2
    if form == "literal":
        return 1.0 - p**2
    raise ValueError(f"unknown brier form {form!r}; expected one of {BRIER_FORMS}")


def brier_fde(preds, probs, gt, K: int = 6, form: str = "standard") -> np.ndarray:
    """Per-agent brier-FDE: FDE of the min-FDE mode among the top K plus its penalty.

    ``preds`` [M, ..., T, 2], ``probs`` [M, ...], ``gt`` [..., T, 2].
    """
    probs = np.asarray(probs, dtype=np.float64)
    order = probability_order(probs)[:K]
    f = np.take_along_axis(fde(preds, gt), order, axis=0)
    p = np.take_along_axis(probs, order, axis=0)
    best = np.argmin(f, axis=0)[None]
    return np.take_along_axis(f, best, 0)[0] + brier_penalty(np.take_along_axis(p, best, 0)[0], form)


def miss_rate(best_fdes, threshold: float = MISS_THRESHOLD) -> float:
    """Fraction of entries whose best FDE exceeds ``threshold`` (equality is a hit)."""
    best = np.asarray(best_fdes, dtype=np.float64).reshape(-1)
    if best.size == 0:
        return float("nan")
    return float(np.mean(best > threshold))


def scene_collides(joint: np.ndarray, threshold: float = COLLISION_THRESHOLD) -> bool:
    """True if any two agents of ``joint`` ([A, T, 2]) come within ``threshold`` at a shared step."""
    joint = np.asarray(joint, dtype=np.float64)
    A = joint.shape[0]
    if A < 2:
        return False
    d = np.linalg.norm(joint[:, None] - joint[None, :], axis=-1)  # [A, A, T]
    iu = np.triu_indices(A, k=1)
    return bool((d[iu] < threshold).any())


def collision_rate(joints: Sequence[np.ndarray], threshold: float = COLLISION_THRESHOLD) -> tuple[float, int]:
    """Fraction of scenes with a collision, and the number of scenes excluded (< 2 agents)."""
    counted = [j for j in joints if np.asarray(j).shape[0] >= 2]
    excluded = len(joints) - len(counted)
    if excluded:
        log.info("collision rate: %d scene(s) with fewer than 2 agents excluded", excluded)
    if not counted:
        return float("nan"), excluded
    return float(np.mean([scene_collides(j, threshold) for j in counted])), excluded


def mode_probabilities(modes: np.ndarray, anchors: np.ndarray | None, scores: np.ndarray | None) -> np.ndarray:
    """Per-agent mode probabilities from the nearest prior anchor (by ADE).

    ``modes`` [K, A, T, 2]; ``anchors`` [A, Kp, T, 2]; ``scores`` [A, Kp].
    Without anchors every mode gets ``1/K``.
    """
    K, A = modes.shape[:2]
    if anchors is None or scores is None or anchors.shape[1] == 0:
        return np.full((K, A), 1.0 / K)
    d = ade(modes[:, :, None], anchors[None])  # [K, A, Kp]
    nearest = np.argmin(d, axis=-1)
    raw = np.take_along_axis(np.broadcast_to(scores[None], (K,) + scores.shape), nearest[..., None], -1)[..., 0]
    total = raw.sum(axis=0, keepdims=True)
    uniform = np.full_like(raw, 1.0 / K)
    return np.where(total > 0, raw / np.where(total > 0, total, 1.0), uniform)


@dataclass
class MetricReport:
    ADE_1: float
    ADE_6: float
    FDE_1: float
    FDE_6: float
    bFDE_6: float
    MR_6: float
    CR_6: float
    n_scenes: int
    n_agents: int
    brier_form: str = "standard"
    K: int = 6
    cr_excluded_scenes: int = 0
    nfe: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_row(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k != "extra"}
        d.update({f"extra.{k}": v for k, v in self.extra.items()})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(d), lineterminator="\n")
        w.writeheader()
        w.writerow(d)
        return buf.getvalue()


def evaluate(preds: Sequence[PredictionSet], gts: Sequence[np.ndarray], K: int = 6,
             brier_form: str = "standard", agent_masks: Sequence[np.ndarray] | None = None) -> MetricReport:
    """Aggregate metrics over scenes. ``gts[i]`` is [A, T, 2] for ``preds[i]``.

    ADE/FDE/MR/b-FDE are averaged over all (valid) agents; CR over scenes.
    """
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truth lists differ in length")
    if brier_form not in BRIER_FORMS:
        raise ValueError(f"unknown brier form {brier_form!r}")
    a1, aK, f1, fK, bf, joints = [], [], [], [], [], []
    nfe = 0
    for i, (ps, gt) in enumerate(zip(preds, gts)):
        gt = np.asarray(gt, dtype=np.float64)
        if gt.shape != ps.modes.shape[1:]:
            raise ValueError(f"scene {ps.scene_id}: gt shape {gt.shape} vs predictions {ps.modes.shape[1:]}")
        keep = np.ones(ps.n_agents, dtype=bool) if agent_masks is None else np.asarray(agent_masks[i], dtype=bool)
        order = probability_order(ps.probs)
        e_ade = ade(ps.modes, gt[None])
        e_fde = fde(ps.modes, gt[None])
        a1.append(min_over_modes(e_ade, 1, order)[keep])
        aK.append(min_over_modes(e_ade, K, order)[keep])
        f1.append(min_over_modes(e_fde, 1, order)[keep])
        fK.append(min_over_modes(e_fde, K, order)[keep])
        bf.append(brier_fde(ps.modes, ps.probs, gt[None], K, brier_form)[keep])
        top = order[0]
        joints.append(ps.modes[top, np.arange(ps.n_agents)][keep])
        nfe = max(nfe, ps.nfe)
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0)
    a1, aK, f1, fK, bf = map(cat, (a1, aK, f1, fK, bf))
    cr, excluded = collision_rate(joints)
    mean = lambda x: float(x.mean()) if x.size else float("nan")
    return MetricReport(
        ADE_1=mean(a1), ADE_6=mean(aK), FDE_1=mean(f1), FDE_6=mean(fK), bFDE_6=mean(bf),
        MR_6=miss_rate(fK), CR_6=cr, n_scenes=len(preds), n_agents=int(aK.size),
        brier_form=brier_form, K=K, cr_excluded_scenes=excluded, nfe=nfe,
    )
