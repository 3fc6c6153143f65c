"""End-to-end runs: data -> codec -> train -> sample -> evaluate, plus ablation sweeps.

Every artifact written by :func:`pipeline` lives in a directory named after
the resolved config hash and carries that hash (in its metadata, header or
file name).
"""
from __future__ import annotations

import contextlib
import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ectraj.checkpoint import load_checkpoint, save_checkpoint
from ectraj.config import RunConfig
from ectraj.denoiser import CallCounter
from ectraj.errors import ConfigError, NumericalError
from ectraj.features import SceneArrays, build_arrays
from ectraj.latent import LatentCodec, codec_report, fit_codec
from ectraj.metrics import MetricReport, PredictionSet, evaluate
from ectraj.plotting import save_scene_svg
from ectraj.sampler import SamplerConfig, count_nfe, predict
from ectraj.scenegen import Scene, make_splits, prior_oracle, save_scenes
from ectraj.trainer import TrainResult, train

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the error."""

    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.original = exc


@contextlib.contextmanager
def stage(name: str):
    log.info("stage: %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # re-raised with the stage attached
        raise StageError(name, exc) from exc


# --- data ---------------------------------------------------------------------


@dataclass
class DataBundle:
    splits: dict[str, list[Scene]]
    train: SceneArrays
    val: SceneArrays | None
    test: SceneArrays
    codec: LatentCodec


def generate_splits(cfg: RunConfig) -> dict[str, list[Scene]]:
    d = cfg.data
    return make_splits(d.seed, d.n_train, d.n_val, d.n_test, d.scene)


def fit_codec_on(arrays: SceneArrays, cfg: RunConfig) -> LatentCodec:
    return fit_codec(arrays.target[arrays.agent_mask], copy.deepcopy(cfg.codec))


def load_codec(path) -> LatentCodec:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"codec file not found: {p}")
    try:
        groups, _ = load_checkpoint(p)
        return LatentCodec.from_arrays(groups["codec"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{p} is not a codec file: {exc}") from exc


def save_codec(path, codec: LatentCodec, meta: dict | None = None) -> str:
    return save_checkpoint(path, {"codec": codec.arrays()}, meta=meta or {})


_DATA_CACHE: dict[str, DataBundle] = {}


def _data_key(cfg: RunConfig) -> str:
    return json.dumps([asdict(cfg.data), asdict(cfg.oracle), asdict(cfg.codec), cfg.codec_path], sort_keys=True)


def prepare_data(cfg: RunConfig, use_cache: bool = True) -> DataBundle:
    """Scenes, padded arrays and the fitted codec (memoised per data/oracle/codec config)."""
    key = _data_key(cfg)
    if use_cache and key in _DATA_CACHE:
        return _DATA_CACHE[key]
    codec = load_codec(cfg.codec_path) if cfg.codec_path else None
    splits = generate_splits(cfg)
    seed = cfg.data.seed
    arrays = {name: build_arrays(sc, cfg.oracle, seed=seed) if sc else None for name, sc in splits.items()}
    if codec is None:
        codec = fit_codec_on(arrays["train"], cfg)
    elif codec.traj_dim != arrays["train"].target.shape[-1]:
        raise ConfigError(f"codec expects {codec.traj_dim}-dim trajectories, data has {arrays['train'].target.shape[-1]}")
    bundle = DataBundle(splits, arrays["train"], arrays["val"], arrays["test"], codec)
    if use_cache:
        _DATA_CACHE[key] = bundle
    return bundle


def clear_cache() -> None:
    _DATA_CACHE.clear()


# --- train / evaluate ------------------------------------------------------------


def sampling_params(result_or_groups, weights: str) -> dict:
    if isinstance(result_or_groups, TrainResult):
        return result_or_groups.params if weights == "student" else result_or_groups.ema
    return result_or_groups[weights]


def make_validate_fn(cfg: RunConfig, codec: LatentCodec):
    scfg = copy.deepcopy(cfg.sampler)

    def validate(params, ema, arrays: SceneArrays):
        use = params if scfg.weights == "student" else ema
        sub = arrays
        n = cfg.train.val_scenes
        if n and n < len(arrays):
            sub = _subset(arrays, np.arange(n))
        preds = predict(use, sub, codec, cfg.denoiser, scfg)
        rep = evaluate(preds, _gts(sub), K=cfg.metrics.K, brier_form=cfg.metrics.brier_form)
        return round(rep.ADE_6, 6), round(rep.FDE_6, 6)

    return validate


def _subset(arrays: SceneArrays, idx: np.ndarray) -> SceneArrays:
    return SceneArrays(**{k: v[idx] for k, v in vars(arrays).items()})


def _gts(arrays: SceneArrays) -> list[np.ndarray]:
    return [arrays.gt_world[i, : arrays.n_agents[i]] for i in range(len(arrays))]


def train_model(cfg: RunConfig, data: DataBundle, out_dir=None) -> TrainResult:
    val = data.val if data.val is not None and len(data.val) else None
    return train(data.train, data.codec, cfg.denoiser, cfg.train, val_arrays=val, out_dir=out_dir,
                 validate_fn=make_validate_fn(cfg, data.codec), meta={"config_hash": cfg.hash()})


def evaluate_params(params: dict, cfg: RunConfig, data: DataBundle, nfe: int | None = None,
                    arrays: SceneArrays | None = None) -> tuple[MetricReport, list[PredictionSet], dict]:
    """Sample the test split (or ``arrays``) and compute the metric report."""
    arrays = data.test if arrays is None else arrays
    scfg = copy.deepcopy(cfg.sampler)
    if nfe is not None:
        scfg.nfe = nfe
    counter = CallCounter()
    t0 = time.perf_counter()
    preds = predict(params, arrays, data.codec, cfg.denoiser, scfg, counter, use_prior_probs=cfg.oracle.enabled)
    wall = time.perf_counter() - t0
    report = evaluate(preds, _gts(arrays), K=cfg.metrics.K, brier_form=cfg.metrics.brier_form)
    report.nfe = count_nfe(counter, len(arrays), scfg.modes)
    timing = {"wall_time_s": wall, "per_scene_ms": 1000 * wall / len(arrays), "denoiser_calls": counter.calls,
              "nfe_per_mode": report.nfe}
    return report, preds, timing


# --- persistence of predictions ---------------------------------------------------


def write_predictions(path, preds: Iterable[PredictionSet], config_hash: str = "") -> None:
    with open(path, "w") as fh:
        for ps in preds:
            for a in range(ps.n_agents):
                for k in range(ps.K):
                    rec = {"scene_id": ps.scene_id, "agent_id": a, "mode_id": k,
                           "probability": float(ps.probs[k, a]),
                           "waypoints": np.round(ps.modes[k, a], 6).tolist(), "nfe": ps.nfe}
                    if config_hash:
                        rec["config_hash"] = config_hash
                    fh.write(json.dumps(rec) + "\n")


def read_predictions(path) -> list[PredictionSet]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"predictions file not found: {p}")
    by_scene: dict[int, dict] = {}
    for line in p.read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        s = by_scene.setdefault(r["scene_id"], {"nfe": r.get("nfe", 1), "items": {}})
        s["items"][(r["mode_id"], r["agent_id"])] = (r["probability"], r["waypoints"])
    out = []
    for sid in sorted(by_scene):
        items = by_scene[sid]["items"]
        K = 1 + max(k for k, _ in items)
        A = 1 + max(a for _, a in items)
        if len(items) != K * A:
            raise ConfigError(f"scene {sid}: incomplete (mode, agent) grid in predictions")
        T = len(next(iter(items.values()))[1])
        modes = np.zeros((K, A, T, 2))
        probs = np.zeros((K, A))
        for (k, a), (pr, wp) in items.items():
            modes[k, a] = wp
            probs[k, a] = pr
        probs = probs / probs.sum(axis=0, keepdims=True)  # undo rounding drift from text I/O
        out.append(PredictionSet(sid, modes, probs, nfe=by_scene[sid]["nfe"]))
    return out


def evaluate_files(pred_path, scenes: Sequence[Scene], K: int = 6, brier_form: str = "standard") -> MetricReport:
    preds = read_predictions(pred_path)
    by_id = {sc.scene_id: sc for sc in scenes}
    missing = [p.scene_id for p in preds if p.scene_id not in by_id]
    if missing:
        raise ConfigError(f"predictions reference unknown scene ids, e.g. {missing[:3]}")
    return evaluate(preds, [by_id[p.scene_id].futures for p in preds], K=K, brier_form=brier_form)


def write_report(out_dir: Path, report: MetricReport, config_hash: str, stem: str = "metrics") -> None:
    report.extra["config_hash"] = config_hash
    (out_dir / f"{stem}.json").write_text(report.to_json() + "\n")
    (out_dir / f"{stem}.csv").write_text(report.csv_row())


# --- pipeline ---------------------------------------------------------------------


def run_dir(cfg: RunConfig, out_root) -> Path:
    return Path(out_root) / f"{cfg.tag}-{cfg.hash()}"


def pipeline(cfg: RunConfig, out_root, plots: bool = True) -> Path:
    """Run every stage and write the artifacts; returns the run directory.

    Configuration problems (including a missing codec file) are raised before
    anything is written.
    """
    cfg = cfg.resolved()
    if cfg.codec_path and not Path(cfg.codec_path).is_file():
        raise ConfigError(f"codec file not found: {cfg.codec_path}")
    h = cfg.hash()
    out = run_dir(cfg, out_root)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    timing = {}
    with stage("data generate"):
        t0 = time.perf_counter()
        data = prepare_data(cfg)
        splits = data.splits
        for name, scenes in splits.items():
            if scenes:
                priors = [prior_oracle(sc, cfg.oracle, seed=cfg.data.seed) for sc in scenes]
                save_scenes(out / f"scenes_{name}.jsonl", scenes, priors)
        timing["data_s"] = time.perf_counter() - t0
    with stage("codec fit"):
        save_codec(out / "codec.json", data.codec, meta={"config_hash": h})
        rep = codec_report(data.codec, data.train.target[data.train.agent_mask])
        (out / "codec_report.json").write_text(json.dumps({**rep, "config_hash": h}, indent=2, sort_keys=True) + "\n")
    with stage("train"):
        result = train_model(cfg, data, out_dir=out)
        timing["train_s"] = result.wall_time
    with stage("sample"):
        params = sampling_params(result, cfg.sampler.weights)
        report, preds, tsample = evaluate_params(params, cfg, data)
        write_predictions(out / "predictions.jsonl", preds, h)
        timing.update({f"sample_{k}": v for k, v in tsample.items()})
    with stage("evaluate"):
        write_report(out, report, h)
    if plots and cfg.metrics.n_plots:
        with stage("plot"):
            pdir = out / "plots"
            pdir.mkdir(exist_ok=True)
            for ps, sc in list(zip(preds, splits["test"]))[: cfg.metrics.n_plots]:
                save_scene_svg(pdir / f"scene_{sc.scene_id:06d}_{h}.svg", sc.histories, sc.futures, ps.modes,
                               ps.probs, sc.map_polylines, sc.history_mask, title=f"scene {sc.scene_id} ({h})")
    (out / "timing.json").write_text(json.dumps({**timing, "config_hash": h}, indent=2, sort_keys=True) + "\n")
    return out


# --- ablations ----------------------------------------------------------------------

AXES = {
    "shots": [("K=1", {"train.K": 1}), ("K=6", {"train.K": 6})],
    "fusion": [(f, {"train.fusion": f}) for f in ("NF", "FF", "R2", "Prog", "M+E")],
    "schedule": [("ICT", {"train.schedule": "ICT"}), ("ECT", {"train.schedule": "ECT"})],
    "q": [(f"q={q}", {"train.q": float(q)}) for q in (2, 4, 6, 8)],
    "nfe": [(f"NFE={n}", {"sampler.nfe": n}) for n in (1, 2, 4)],
    "priors": [("priors on", {"oracle.enabled": True}), ("priors off", {"oracle.enabled": False})],
}

ROW_FIELDS = ("axis", "variant", "seed", "config_hash", "ADE_6", "FDE_6", "ADE_1", "FDE_1", "bFDE_6", "MR_6",
              "CR_6", "NFE", "train_s", "per_scene_ms")


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    new = RunConfig.from_dict(cfg.to_dict())
    for dotted, value in overrides.items():
        obj = new
        *path, last = dotted.split(".")
        for p in path:
            obj = getattr(obj, p)
        if not hasattr(obj, last):
            raise ConfigError(f"unknown config field {dotted!r}")
        setattr(obj, last, value)
    return new


def _row(axis, variant, seed, cfg, report: MetricReport, train_s, timing) -> dict:
    return {"axis": axis, "variant": variant, "seed": seed, "config_hash": cfg.hash(),
            "ADE_6": report.ADE_6, "FDE_6": report.FDE_6, "ADE_1": report.ADE_1, "FDE_1": report.FDE_1,
            "bFDE_6": report.bFDE_6, "MR_6": report.MR_6, "CR_6": report.CR_6, "NFE": report.nfe,
            "train_s": round(train_s, 2), "per_scene_ms": round(timing["per_scene_ms"], 3)}


def run_variant(cfg: RunConfig) -> tuple[MetricReport, TrainResult, dict]:
    """Train and evaluate one resolved config (data shared through the cache)."""
    cfg = cfg.resolved()
    data = prepare_data(cfg)
    result = train_model(cfg, data)
    report, _, timing = evaluate_params(sampling_params(result, cfg.sampler.weights), cfg, data)
    return report, result, timing


def ablate(base: RunConfig, axis: str, seeds: Sequence[int] = (0,), out_path=None) -> list[dict]:
    """Train/evaluate every variant of ``axis`` for each seed; rows carry config hashes.

    The ``nfe`` axis trains once per seed and only re-samples.
    """
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    rows = []
    for seed in seeds:
        base_s = apply_overrides(base, {"seed": seed})
        if axis == "nfe":
            cfg0 = base_s.resolved()
            data = prepare_data(cfg0)
            result = train_model(cfg0, data)
            params = sampling_params(result, cfg0.sampler.weights)
            for name, ov in AXES[axis]:
                cfg = apply_overrides(base_s, ov).resolved()
                report, _, timing = evaluate_params(params, cfg, data)
                rows.append(_row(axis, name, seed, cfg, report, result.wall_time, timing))
            continue
        for name, ov in AXES[axis]:
            cfg = apply_overrides(base_s, ov).resolved()
            report, result, timing = run_variant(cfg)
            rows.append(_row(axis, name, seed, cfg, report, result.wall_time, timing))
            log.info("ablate %s/%s seed %d: ADE_6 %.4f FDE_6 %.4f", axis, name, seed, report.ADE_6, report.FDE_6)
    if out_path is not None:
        write_rows(out_path, rows)
    return rows


BENCH_VARIANTS = {
    "ECTraj": {},
    "one-shot": {"train.K": 1},
    "FF": {"train.fusion": "FF"},
    "NF": {"train.fusion": "NF"},
    "priors-off": {"oracle.enabled": False},
}


def directional_bench(base: RunConfig, seeds: Sequence[int] = (0, 1, 2), variants: dict | None = None,
                      out_path=None) -> list[dict]:
    """The multi-seed comparison of the full method against its ablated variants."""
    variants = BENCH_VARIANTS if variants is None else variants
    rows = []
    for seed in seeds:
        for name, ov in variants.items():
            cfg = apply_overrides(base, {"seed": seed, **ov}).resolved()
            report, result, timing = run_variant(cfg)
            rows.append(_row("bench", name, seed, cfg, report, result.wall_time, timing))
            log.info("bench %s seed %d: ADE_6 %.4f FDE_6 %.4f (%.0fs)", name, seed, report.ADE_6, report.FDE_6,
                     result.wall_time)
            if out_path is not None:
                write_rows(out_path, rows)
    return rows


def write_rows(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def summarize(rows: Sequence[dict], keys=("ADE_6", "FDE_6")) -> dict[str, dict[str, float]]:
    """Mean of ``keys`` per variant over seeds."""
    out: dict[str, dict[str, list]] = {}
    for r in rows:
        d = out.setdefault(r["variant"], {k: [] for k in keys})
        for k in keys:
            d[k].append(float(r[k]))
    return {v: {k: float(np.mean(x)) for k, x in d.items()} for v, d in out.items()}


__all__ = ["ConfigError", "NumericalError", "StageError", "pipeline", "ablate", "prepare_data", "run_variant"]
