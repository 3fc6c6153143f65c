"""Consistency-model multi-agent trajectory prediction on synthetic traffic scenes.

Modules
-------
autograd, optim   small reverse-mode autodiff and AdamW on numpy
schedule          noise grid, timestep pmf, curriculum and teacher-index schedule
latent            linear trajectory <-> latent codec
scenegen          synthetic intersection scenes, context features, prior oracle
denoiser          conditional consistency function f = c_skip x + c_out F
trainer           multi-shot consistency training with ground-truth fusion
sampler           single/multi-step sampling
metrics           ADE/FDE, brier-FDE, miss and collision rates
experiment, cli   pipeline, ablations and the command line
"""

__version__ = "0.1.0"
