"""Train a small denoiser, then sample the test split with 1, 2 and 4 network evaluations.

Run:  python3 demos/03_train_and_sample.py      (about a minute on one CPU core)
"""
from ectraj import experiment as ex
from ectraj.config import tiny_config

cfg = tiny_config()
cfg.data.n_train = 200
cfg.train.epochs = 6
cfg = cfg.resolved()

data = ex.prepare_data(cfg)
result = ex.train_model(cfg, data)
for h in result.history:
    print(f"epoch {h['epoch']}: loss {h['loss']:.4f}")

params = ex.sampling_params(result, cfg.sampler.weights)
print("NFE  ADE_6   FDE_6   MR_6   ms/scene")
for nfe in (1, 2, 4):
    report, _, timing = ex.evaluate_params(params, cfg, data, nfe=nfe)
    print(f"{nfe:3d}  {report.ADE_6:.3f}  {report.FDE_6:.3f}  {report.MR_6:.3f}  {timing['per_scene_ms']:.1f}")
