import dataclasses

import numpy as np
import pytest

from ectraj import scenegen as sg
from ectraj.metrics import ade


def test_same_seed_same_scene():
    a, b = sg.generate_scene(3, scene_id=17), sg.generate_scene(3, scene_id=17)
    for field in ("histories", "futures", "headings", "map_polylines"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    assert a.intents == b.intents
    c = sg.generate_scene(4, scene_id=17)
    assert not np.array_equal(a.futures, c.futures)


def test_agent_count_and_shapes(scenes):
    cfg = sg.SceneConfig()
    for s in scenes:
        assert 2 <= s.n_agents <= 6
        assert s.histories.shape == (s.n_agents, cfg.T_h, 2)
        assert s.futures.shape == (s.n_agents, cfg.T_f, 2)
        assert set(s.intents) <= set(sg.INTENTS)


def test_stop_intent_barely_moves():
    seen = 0
    for s in sg.generate_dataset(21, 300):
        for i, intent in enumerate(s.intents):
            if intent == "stop":
                seen += 1
                path = np.concatenate([s.histories[i, -1:], s.futures[i]])
                assert np.linalg.norm(np.diff(path, axis=0), axis=1).sum() <= 0.5
    assert seen > 50


def test_speed_bound_over_a_thousand_scenes():
    cfg = sg.SceneConfig()
    worst = 0.0
    for s in sg.generate_dataset(5, 1000, cfg):
        traj = np.concatenate([s.histories, s.futures], axis=1)
        worst = max(worst, np.linalg.norm(np.diff(traj, axis=1), axis=-1).max())
    assert worst <= cfg.max_speed * cfg.dt + 1e-12


def test_history_future_continuity(scenes):
    # the first future point is one regular step past the last observed one
    for s in scenes:
        hist_step = np.linalg.norm(s.histories[:, -1] - s.histories[:, -2], axis=-1)
        join_step = np.linalg.norm(s.futures[:, 0] - s.histories[:, -1], axis=-1)
        assert np.all(np.abs(join_step - hist_step) < 0.35)


@pytest.mark.parametrize("bad", [
    {"intents": ()},
    {"intents": ("fly",)},
    {"min_agents": 1},
    {"max_agents": 7},
    {"intent_probs": (1.0,)},
    {"speed_range": (4.0, 30.0)},
])
def test_infeasible_config_rejected(bad):
    with pytest.raises(sg.SceneConfigError):
        sg.generate_scene(0, sg.SceneConfig(**bad))


def test_config_error_is_value_error():
    assert issubclass(sg.SceneConfigError, ValueError)


# --- context -------------------------------------------------------------------


def test_identical_scenes_identical_context():
    a = sg.encode_context(sg.generate_scene(8, scene_id=1)).vector()
    b = sg.encode_context(sg.generate_scene(8, scene_id=1)).vector()
    np.testing.assert_array_equal(a, b)


def shifted(scene, dx):
    polys = scene.map_polylines.copy()
    polys[..., :2] += dx
    return dataclasses.replace(scene, histories=scene.histories + dx, futures=scene.futures + dx, map_polylines=polys)


def test_context_is_translation_invariant(scenes):
    for s in scenes[:10]:
        a = sg.encode_context(s).vector()
        b = sg.encode_context(shifted(s, np.array([10.0, 10.0]))).vector()
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_zero_history_agent_gets_padding_vector():
    s = sg.generate_scene(2, scene_id=5)
    mask = s.history_mask.copy()
    mask[1] = False
    s = dataclasses.replace(s, history_mask=mask)
    ctx = sg.encode_context(s)
    vec = ctx.vector()
    assert np.all(np.isfinite(vec))
    assert not vec[1].any()
    assert not ctx.nbr_mask[:, 1].any()


def test_cv_baseline_in_agent_frame():
    s = sg.generate_scene(0, scene_id=3)
    cv = sg.cv_baseline(s)
    origins, rots, _ = sg.agent_frames(s)
    v = (s.histories[:, -1] - s.histories[:, -2])
    for i in range(s.n_agents):
        world = sg.to_world_frame(cv[i], origins[i], rots[i])
        np.testing.assert_allclose(world[-1], s.histories[i, -1] + s.futures.shape[1] * v[i], atol=1e-9)


# --- prior oracle --------------------------------------------------------------


def test_exact_oracle_contains_ground_truth(scenes):
    cfg = sg.OracleConfig(noise_level=0.0, accuracy=1.0)
    for s in scenes:
        prior = sg.prior_oracle(s, cfg)
        for i in range(s.n_agents):
            errs = [ade(prior.anchors[i, k], s.futures[i]) for k in range(cfg.K_prior)]
            assert min(errs) == 0.0
            assert prior.top_intent[i] == s.intents[i]


def test_oracle_off_gives_uniform_scores(scenes):
    prior = sg.prior_oracle(scenes[0], sg.OracleConfig(enabled=False, K_prior=6))
    assert prior.anchors.shape[1] == 0
    np.testing.assert_array_equal(prior.scores, np.full((scenes[0].n_agents, 6), 1 / 6))


def test_scores_form_a_simplex(scenes):
    for s in scenes:
        for cfg in (sg.OracleConfig(), sg.OracleConfig(K_prior=3), sg.OracleConfig(K_prior=8)):
            p = sg.prior_oracle(s, cfg).scores
            assert np.all(p >= 0)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_anchors_respect_speed_bound(scenes):
    for s in scenes:
        prior = sg.prior_oracle(s)
        start = s.histories[:, -1][:, None, None]
        traj = np.concatenate([np.broadcast_to(start, (s.n_agents, 6, 1, 2)), prior.anchors], axis=2)
        assert np.linalg.norm(np.diff(traj, axis=2), axis=-1).max() <= 15.0 * s.dt + 1e-9


def test_oracle_is_deterministic(scenes):
    a, b = sg.prior_oracle(scenes[3], seed=4), sg.prior_oracle(scenes[3], seed=4)
    np.testing.assert_array_equal(a.anchors, b.anchors)
    np.testing.assert_array_equal(a.scores, b.scores)


def test_oracle_rejects_empty_prior():
    with pytest.raises(ValueError):
        sg.prior_oracle(sg.generate_scene(0), sg.OracleConfig(K_prior=0))


@pytest.mark.slow
def test_oracle_accuracy_frequency():
    cfg = sg.OracleConfig(accuracy=0.7)
    hits = total = 0
    for s in sg.generate_dataset(31, 10_000):
        prior = sg.prior_oracle(s, cfg)
        hits += sum(t == i for t, i in zip(prior.top_intent, s.intents))
        total += s.n_agents
    assert abs(hits / total - 0.7) <= 0.02


# --- splits and persistence ----------------------------------------------------


def test_splits_are_disjoint():
    splits = sg.make_splits(0, 30, 10, 20)
    ids = {k: {s.scene_id for s in v} for k, v in splits.items()}
    assert len(ids["train"]) == 30 and len(ids["val"]) == 10 and len(ids["test"]) == 20
    assert not ids["train"] & ids["val"] and not ids["train"] & ids["test"] and not ids["val"] & ids["test"]


def test_jsonl_round_trip(tmp_path, scenes):
    path = tmp_path / "scenes.jsonl"
    priors = [sg.prior_oracle(s) for s in scenes[:5]]
    sg.save_scenes(path, scenes[:5], priors)
    back = sg.load_scenes(path)
    assert len(path.read_text().splitlines()) == 5
    for a, b in zip(scenes[:5], back):
        assert a.scene_id == b.scene_id and a.intents == b.intents
        np.testing.assert_array_equal(a.histories, b.histories)
        np.testing.assert_array_equal(a.futures, b.futures)
        np.testing.assert_array_equal(a.map_polylines, b.map_polylines)
        np.testing.assert_array_equal(a.history_mask, b.history_mask)


def test_unknown_format_version_rejected(scenes):
    rec = sg.scene_to_record(scenes[0])
    rec["format_version"] = 99
    with pytest.raises(ValueError):
        sg.scene_from_record(rec)
