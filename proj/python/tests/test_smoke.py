import math

import numpy as np
import pytest

import cmal


def test_metrics():
    assert cmal.sentence_gleu([4], [[4, 5]]) == pytest.approx(1 / 3)
    assert cmal.sentence_bleu([4, 5, 6], [[4, 5, 6, 7]]) == pytest.approx(0.716531, abs=1e-6)
    assert cmal.repetition_rate([4, 4, 5]) == pytest.approx(0.5)
    assert cmal.postprocess([5, 5, 6]) == [5, 6]
    assert cmal.cider_d([4, 5], [[4, 5]]) >= 0.0
    assert cmal.corpus_bleu([[4, 5, 6, 7]], [[[4, 5, 6, 7]]]) == pytest.approx(100.0)


def test_task_generation():
    task = cmal.Task()
    task.kind = cmal.TaskKind.REVERSE
    assert task.target([3, 4, 5]) == [5, 4, 3]
    pairs = task.generate(5)
    assert len(pairs) == 5
    assert pairs == task.generate(5)
    for src, refs in pairs:
        assert refs[0] == src[::-1]
    with pytest.raises(ValueError):
        task.generate(1, "validation")


def test_model_forward_and_checkpoint(tmp_path):
    cfg = cmal.ModelConfig()
    cfg.d_model, cfg.n_heads, cfg.n_layers, cfg.d_ff, cfg.n_agents = 8, 2, 1, 8, 5
    model = cmal.Seq2Seq(cfg, 3)
    probs = model.na_probs([4, 5, 6])
    assert probs.shape == (5, cfg.vocab_size)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert model.encode([4, 5]).shape == (2, 8)
    path = tmp_path / "m.ckpt"
    model.save(path)
    again = cmal.Seq2Seq.load(path)
    np.testing.assert_array_equal(again.na_probs([4, 5, 6]), probs)
    assert len(model.decode_na([4, 5, 6])) <= 5


def test_counterfactual_baseline_matches_python_marginalization():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), size=3)
    actions = [1, 3, 0]

    def reward(seq):
        return sum(1.0 for i, t in enumerate(seq) if t == i) + 0.1 * len(set(seq))

    got = cmal.counterfactual_baselines(probs, actions, reward, k=4)
    for a in range(3):
        expect = 0.0
        for v in range(4):
            alt = list(actions)
            alt[a] = v
            expect += probs[a, v] * reward(alt)
        assert got[a] == pytest.approx(expect, rel=1e-12)
    comp = cmal.counterfactual_baselines(probs, actions, reward, k=16, compositional=True)
    assert len(comp) == 3
    mixed = cmal.final_baseline(got, comp, 0.5)
    assert mixed[1] == pytest.approx(0.5 * (got[1] + comp[1]))


def test_config_round_trip():
    cfg = cmal.RunConfig({"seed": "4", "baseline": "cf+ca"})
    assert cfg.to_dict()["seed"] == "4"
    assert cmal.RunConfig(cfg.to_dict()).hash() == cfg.hash()
    with pytest.raises(ValueError):
        cmal.RunConfig({"nope": "1"})
    assert cmal.BaselineSpec("cf+ca", k=3).name == "cf+ca"


def test_scoring():
    report = cmal.score([([4, 5], [[5, 4]]), ([4, 5, 6], [[6, 5, 4]])], [[5, 4], [6, 6, 4]], [3])
    assert report["examples"] == 2
    assert len(report["buckets"]) == 2
    assert math.isfinite(report["gleu"])
