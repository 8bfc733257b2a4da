import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import directional_check
from qair.degrade import procedural_image, synth_noise
from qair.encoders import load_backend
from qair.errors import ConfigError, FrozenError, TrainingError
from qair.perceiver import (
    QualityPromptSet,
    TripletSet,
    ce_from_similarities,
    ce_loss,
    classify_from_similarities,
    classify_quality,
    gen_medium_images,
    init_prompts,
    split_folds,
    train_prompts,
)


def triplets(k=6, size=32):
    good = np.stack([procedural_image(i, size) for i in range(k)])
    medium = np.stack([synth_noise(g, 15, i) for i, g in enumerate(good)])
    bad = np.stack([synth_noise(g, 50, 100 + i) for i, g in enumerate(good)])
    return TripletSet(bad, medium, good)


def test_ce_closed_forms():
    assert float(ce_from_similarities(torch.zeros(3, 3, dtype=torch.float64))) == pytest.approx(math.log(3), abs=1e-12)
    sims = torch.zeros(3, 3, dtype=torch.float64)
    sims[0] = torch.tensor([2.0, 1.0, 0.0])
    per_image = -torch.log_softmax(sims, -1).diagonal()
    assert float(per_image[0]) == pytest.approx(0.4076, abs=1e-4)
    big = torch.eye(3, dtype=torch.float64) * 50
    assert float(ce_from_similarities(big)) < 1e-12


def test_classify_from_similarities():
    pred = classify_from_similarities(torch.tensor([[0.9, 0.1, 0.1]]))[0]
    assert pred.tier == "good"
    assert sum(pred.probabilities.values()) == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(s=st.lists(st.floats(-1, 1), min_size=3, max_size=3), c=st.floats(-5, 5))
def test_classification_shift_invariant(s, c):
    a = torch.tensor([s], dtype=torch.float64)
    assert classify_from_similarities(a)[0].tier == classify_from_similarities(a + c)[0].tier


@settings(max_examples=50, deadline=None)
@given(s=st.lists(st.floats(-1, 1), min_size=9, max_size=9))
def test_ce_nonnegative(s):
    assert float(ce_from_similarities(torch.tensor(s, dtype=torch.float64).view(3, 3))) >= 0


def test_init_modes(vl):
    p = init_prompts("partial_random", 0, vl)
    assert p.tokens.shape == (3, 16, 512)
    assert torch.equal(p.T_e[-1], vl.token_embedding("excellent"))
    assert torch.equal(p.T_t[-1], vl.token_embedding("terrible"))
    assert init_prompts("fixed", 0, vl).parameters() == []
    assert torch.equal(init_prompts("random", 5, vl).tokens, init_prompts("random", 5, vl).tokens)
    with pytest.raises(ConfigError):
        init_prompts("clever", 0, vl)


def test_frozen_prompts_are_immutable(vl, tmp_path):
    p = init_prompts("random", 0, vl).freeze()
    before = p.tokens.clone()
    p.tokens.add_(1.0)
    p.T_e.zero_()
    assert torch.equal(p.tokens, before)
    assert p.parameters() == []
    with pytest.raises(FrozenError):
        p.load_tokens(torch.zeros_like(before))
    p.save(tmp_path / "p.npz")
    q = QualityPromptSet.load(tmp_path / "p.npz")
    assert q.frozen and torch.equal(q.tokens, before) and q.init_mode == "random"


def test_ce_gradient_wrt_prompts(vl):
    vl64 = load_backend("vision_language", "toy", seed=3).double()
    p = init_prompts("random", 0, vl64, n_tokens=4)
    p._tokens = p._tokens.detach().double().requires_grad_(True)
    t = triplets(2, 16)
    batch = [x.double() for x in t.batch(np.arange(2))]
    assert directional_check(lambda: ce_loss(p, batch, vl64), p.parameters()) <= 1e-4


def test_train_prompts_reduces_loss_and_freezes(vl):
    t = triplets()
    losses = []
    p = train_prompts(t, vl, iters=60, lr=4e-5, batch_size=6, on_step=lambda s, l, _: losses.append(l))
    assert p.frozen and losses[-1] < losses[0]
    assert 0 <= t.accuracy(p, vl) <= 1


def test_classify_single_image(vl):
    p = init_prompts("partial_random", 0, vl).freeze()
    pred = classify_quality(procedural_image(0, 32), p, vl)
    assert pred.tier in ("good", "medium", "bad")
    tier, probs = pred
    assert sum(probs.values()) == pytest.approx(1.0, abs=1e-6)


def test_train_prompts_nan_aborts_with_last_good(vl):
    t = triplets(3, 16)
    t.good[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingError) as info:
        train_prompts(t, vl, iters=5, batch_size=3)
    assert info.value.prompts.frozen
    assert torch.isfinite(info.value.prompts.tokens).all()


def test_folds_and_cross_restoration():
    a, b = split_folds(10, 3)
    assert sorted(np.concatenate([a, b]).tolist()) == list(range(10))
    assert np.array_equal(a, split_folds(10, 3)[0])
    deg = np.stack([np.full((4, 4, 3), i / 10, np.float32) for i in range(10)])
    seen = []

    def trainer(d, c):
        seen.append({float(x[0, 0, 0]) for x in d})
        return lambda imgs: [x + 0.01 for x in imgs]

    medium, fold_of = gen_medium_images(deg, deg, trainer, seed=3)
    assert len(medium) == 10
    for i, m in enumerate(medium):
        trained_on = seen[0] if fold_of[i] == 1 else seen[1]
        assert float(deg[i, 0, 0, 0]) not in trained_on
        assert np.allclose(m, np.clip(deg[i] + 0.01, 0, 1))
