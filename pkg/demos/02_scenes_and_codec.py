"""Generate synthetic scenes, look at the prior oracle, and fit the latent trajectory codec.

Run:  python3 demos/02_scenes_and_codec.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from ectraj import features as ft
from ectraj import scenegen as sg
from ectraj.latent import codec_report, fit_codec
from ectraj.plotting import save_scene_svg

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

scenes = sg.generate_dataset(0, 200)
s = scenes[0]
print(f"scene {s.scene_id}: {s.n_agents} agents, intents {s.intents}")

# The oracle proposes K_prior candidate futures per agent with a score each.
prior = sg.prior_oracle(s)
print("oracle top intents:", prior.top_intent)
print("oracle scores, agent 0:", np.round(prior.scores[0], 3))

# Fit the codec on agent-frame future residuals and check how faithful it is.
arrays = ft.build_arrays(scenes, sg.OracleConfig())
X = arrays.target[arrays.agent_mask]
codec = fit_codec(X, epochs=300)
rep = codec_report(codec, X)
print(f"codec: {X.shape[1]} -> {codec.latent_dim} dims; round-trip mean {rep['round_trip_mean']:.3f} m; "
      f"distance Spearman {rep['distance_spearman']:.3f}")

# Plot the ground truth with the oracle anchors as stand-in modes.
modes = np.moveaxis(prior.anchors, 1, 0)  # [K, A, T, 2]
save_scene_svg(out / "scene0_oracle.svg", s.histories, s.futures, modes, prior.scores.T, s.map_polylines,
               s.history_mask, title="oracle anchors")
print("wrote", out / "scene0_oracle.svg")
