"""Command line entry point: ``python -m ectraj <command> ...``.

Exit codes: 0 success, 2 usage error, 3 configuration error, 4 numerical
failure, 1 any other failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ectraj import experiment as ex
from ectraj.checkpoint import load_checkpoint
from ectraj.config import RunConfig
from ectraj.denoiser import DenoiserConfig, init_params
from ectraj.errors import ConfigError, NumericalError
from ectraj.latent import codec_report
from ectraj.schedule import alpha_table, build_pmf, build_sigmas, curriculum_N
from ectraj.scenegen import load_scenes, prior_oracle, save_scenes

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3, 4
OUT_ENV = "ECTRAJ_OUT"

log = logging.getLogger("ectraj")


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg.resolved()


def _out_dir(args, cfg: RunConfig | None = None, leaf: str = "") -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = default_out_root()
    if cfg is not None:
        return ex.run_dir(cfg, root) / leaf if leaf else ex.run_dir(cfg, root)
    return root / leaf


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --- commands ---------------------------------------------------------------------


def cmd_data_generate(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:  # for data generation the seed is the scene seed
        cfg.data.seed = args.seed
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.count is not None:
        if args.count < 1:
            raise ConfigError("--count must be >= 1")
        from ectraj.scenegen import generate_dataset

        splits = {"all": generate_dataset(cfg.data.seed, args.count, cfg.data.scene)}
    else:
        splits = ex.generate_splits(cfg)
    for name, scenes in splits.items():
        priors = [prior_oracle(sc, cfg.oracle, seed=cfg.data.seed) for sc in scenes]
        save_scenes(out / f"scenes_{name}.jsonl", scenes, priors)
    cfg.save(out / "config.json")
    print(f"wrote {sum(len(s) for s in splits.values())} scenes to {out} (config {cfg.hash()})")
    return EXIT_OK


def _arrays_from_scenes(path, cfg: RunConfig):
    from ectraj.features import build_arrays

    if not Path(path).is_file():
        raise ConfigError(f"scene file not found: {path}")
    scenes = load_scenes(path)
    if not scenes:
        raise ConfigError(f"no scenes in {path}")
    return scenes, build_arrays(scenes, cfg.oracle, seed=cfg.data.seed)


def cmd_codec_fit(args) -> int:
    cfg = _load_config(args)
    if args.scenes:
        _, arrays = _arrays_from_scenes(args.scenes, cfg)
    else:
        arrays = ex.prepare_data(cfg, use_cache=False).train
    codec = ex.fit_codec_on(arrays, cfg)
    out = Path(args.out) if args.out else _out_dir(args, cfg, "codec.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    ex.save_codec(out, codec, meta={"config_hash": cfg.hash()})
    rep = codec_report(codec, arrays.target[arrays.agent_mask])
    print(json.dumps({k: v for k, v in rep.items() if k != "latent_std"}, indent=2, sort_keys=True))
    print(f"codec written to {out}")
    return EXIT_OK


def cmd_codec_eval(args) -> int:
    cfg = _load_config(args)
    codec = ex.load_codec(args.codec)
    _, arrays = _arrays_from_scenes(args.scenes, cfg)
    rep = codec_report(codec, arrays.target[arrays.agent_mask])
    text = json.dumps(rep, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_schedule_inspect(args) -> int:
    qs = [float(q) for q in args.q.split(",")]
    rows = []
    for (q, N), (lo, hi) in alpha_table(qs, base_N=args.base_N).items():
        rows.append({"q": q, "N": N, "ratio_min": round(lo, 6), "ratio_max": round(hi, 6)})
    if args.epochs:
        sched = [{"epoch": e, "N": curriculum_N(e, args.epochs, args.base_N)} for e in range(1, args.epochs + 1)]
    else:
        sched = []
    out = sys.stdout if not args.out else open(args.out, "w", newline="")
    try:
        w = csv.DictWriter(out, fieldnames=["q", "N", "ratio_min", "ratio_max"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        if args.pmf:
            s = build_sigmas(args.pmf)
            p = build_pmf(s)
            out.write("\nindex,sigma,pmf\n")
            for i in range(1, args.pmf + 1):
                out.write(f"{i},{s.sigmas[i]:.12g},{p.pmf[i - 1]:.12g}\n")
        if sched:
            out.write("\nepoch,N\n")
            for r in sched:
                out.write(f"{r['epoch']},{r['N']}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    data = ex.prepare_data(cfg, use_cache=False)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    ex.save_codec(out / "codec.json", data.codec, meta={"config_hash": cfg.hash()})
    result = ex.train_model(cfg, data, out_dir=out)
    last = result.history[-1]
    print(f"trained {cfg.train.epochs} epochs in {result.wall_time:.1f}s; final loss {last['loss']:.4f}; "
          f"checkpoint {out / 'checkpoint.json'} (config {cfg.hash()})")
    return EXIT_OK


def _load_model(checkpoint, cfg: RunConfig):
    p = Path(checkpoint)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    groups, meta = load_checkpoint(p)
    if "codec" not in groups or "student" not in groups:
        raise ConfigError(f"{p} is not a training checkpoint")
    from ectraj.latent import LatentCodec

    codec = LatentCodec.from_arrays(groups["codec"])
    dcfg = cfg.denoiser
    if "denoiser" in meta:
        dcfg = DenoiserConfig(**meta["denoiser"])
    ref = init_params(dcfg, np.random.default_rng(0))
    params = groups[cfg.sampler.weights]
    bad = [k for k in ref if k not in params or params[k].shape != ref[k].shape]
    if bad or codec.latent_dim != dcfg.latent_dim:
        raise ConfigError(f"checkpoint does not match the denoiser configuration (e.g. {bad[:3]})")
    return params, codec, dcfg, meta


def cmd_sample(args) -> int:
    cfg = _load_config(args)
    if args.nfe is not None:
        cfg.sampler.nfe = args.nfe
        cfg.sampler.validate()
    params, codec, dcfg, meta = _load_model(args.checkpoint, cfg)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"predictions_nfe{cfg.sampler.nfe}.jsonl"
    cfg.denoiser = dcfg
    if args.scenes:
        _, arrays = _arrays_from_scenes(args.scenes, cfg)
        data = ex.DataBundle({}, None, None, arrays, codec)
    else:
        cfg.codec_path = str(args.checkpoint)  # the checkpoint carries its codec
        data = ex.prepare_data(cfg, use_cache=False)
        arrays = data.test
    report, preds, timing = ex.evaluate_params(params, cfg, data, arrays=arrays)
    out.parent.mkdir(parents=True, exist_ok=True)
    ex.write_predictions(out, preds, meta.get("config_hash", cfg.hash()))
    print(f"wrote {len(preds)} scenes x {cfg.sampler.modes} modes to {out}; NFE per mode = {report.nfe}; "
          f"{timing['per_scene_ms']:.2f} ms/scene")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if not Path(args.scenes).is_file():
        raise ConfigError(f"scene file not found: {args.scenes}")
    report = ex.evaluate_files(args.predictions, load_scenes(args.scenes), K=args.K, brier_form=args.brier_form)
    out = Path(args.out) if args.out else Path(args.predictions).with_suffix("")
    out.mkdir(parents=True, exist_ok=True)
    h = args.config_hash or _hash_from_predictions(args.predictions)
    ex.write_report(out, report, h)
    print(report.to_json())
    return EXIT_OK


def _hash_from_predictions(path) -> str:
    with open(path) as fh:
        first = fh.readline()
    return json.loads(first).get("config_hash", "") if first.strip() else ""


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed if args.seed is not None else cfg.seed]
    if args.axis not in ex.AXES:
        print(f"unknown axis {args.axis!r}; choose from {', '.join(sorted(ex.AXES))}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else default_out_root() / f"ablate_{args.axis}_{cfg.resolved().hash()}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ex.ablate(cfg, args.axis, seeds, out_path=out)
    for r in rows:
        print(f"{r['variant']:>12} seed {r['seed']}  ADE_6 {r['ADE_6']:.4f}  FDE_6 {r['FDE_6']:.4f}  [{r['config_hash']}]")
    print(f"table written to {out}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    out = ex.pipeline(cfg, args.out or default_out_root(), plots=not args.no_plots)
    print(f"run directory: {out}")
    print((out / "metrics.json").read_text())
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ectraj", description="Consistency-model trajectory prediction on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", help="run config JSON (defaults to the built-in desk config)")
        sp.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
        sp.add_argument("--out", help=f"output path (default: under ${OUT_ENV} or ./runs)")
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="checkpoint.json written by 'train'")

    data = sub.add_parser("data", help="synthetic scene data").add_subparsers(dest="action", required=True)
    g = data.add_parser("generate", help="generate train/val/test scene files")
    common(g)
    g.add_argument("--count", type=int, help="write one file of this many scenes instead of the splits")
    g.set_defaults(func=cmd_data_generate)

    codec = sub.add_parser("codec", help="trajectory codec").add_subparsers(dest="action", required=True)
    f = codec.add_parser("fit", help="fit the codec on training futures")
    common(f)
    f.add_argument("--scenes", help="scene JSON-lines file (default: generate from the config)")
    f.set_defaults(func=cmd_codec_fit)
    e = codec.add_parser("eval", help="round-trip and distance-rank report")
    common(e)
    e.add_argument("--codec", required=True)
    e.add_argument("--scenes", required=True)
    e.set_defaults(func=cmd_codec_eval)

    sched = sub.add_parser("schedule", help="noise schedule tools").add_subparsers(dest="action", required=True)
    s = sched.add_parser("inspect", help="teacher/student ratio table, pmf and curriculum as CSV")
    s.add_argument("--q", default="2,4,6,8")
    s.add_argument("--base-N", dest="base_N", type=int, default=10)
    s.add_argument("--pmf", type=int, default=0, help="also print the timestep pmf for this N")
    s.add_argument("--epochs", type=int, default=0, help="also print the curriculum N per epoch")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule_inspect)

    t = sub.add_parser("train", help="train a denoiser")
    common(t)
    t.set_defaults(func=cmd_train)

    sm = sub.add_parser("sample", help="sample predictions from a checkpoint")
    common(sm, checkpoint=True)
    sm.add_argument("--nfe", type=int)
    sm.add_argument("--scenes", help="scene file to predict (default: the config's test split)")
    sm.set_defaults(func=cmd_sample)

    ev = sub.add_parser("evaluate", help="metrics for a predictions file")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--scenes", required=True)
    ev.add_argument("--out", help="directory for metrics.json / metrics.csv")
    ev.add_argument("--K", type=int, default=6)
    ev.add_argument("--brier-form", dest="brier_form", choices=("standard", "literal"), default="standard")
    ev.add_argument("--config-hash", dest="config_hash", default="")
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="train/evaluate every variant along one axis")
    common(ab)
    ab.add_argument("--axis", required=True, help=f"one of: {', '.join(sorted(ex.AXES))}")
    ab.add_argument("--seeds", help="comma-separated seeds (default: --seed or the config seed)")
    ab.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("pipeline", help="data -> codec -> train -> sample -> evaluate")
    common(pl)
    pl.add_argument("--no-plots", action="store_true")
    pl.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ex.StageError as exc:
        print(f"error: stage '{exc.stage}' failed: {exc.original}", file=sys.stderr)
        if isinstance(exc.original, ConfigError):
            return EXIT_CONFIG
        if isinstance(exc.original, NumericalError):
            return EXIT_NUMERICAL
        return EXIT_FAIL
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
