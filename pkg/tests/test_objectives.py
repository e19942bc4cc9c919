import numpy as np
import pytest
import torch

from pasta_vit.objectives import (LossWeights, disparity, frozen, loss_attention, loss_backdoor,
                                  loss_clean, loss_visual, model_objective,
                                  single_level_objective, trigger_objective)
from pasta_vit.trigger import FixedLocation, default_mis

from conftest import central_diff, rel_err

P = 4
G = 4


def manual_poison(images, t, locs):
    """Explicit per-sample patch addition."""
    out = images.clone()
    for n, flat in enumerate(locs):
        r, c = divmod(int(flat), G)
        out[n, :, r * P:(r + 1) * P, c * P:(c + 1) * P] += t
    return out


def manual_ce(logits, labels):
    lp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -lp[torch.arange(len(labels)), labels].mean()


def numpy_map(attns, layer):
    out = []
    for n in range(attns[0].shape[0]):
        m = np.eye(attns[0].shape[-1])
        for a in attns[:layer]:
            m = a[n].detach().numpy().mean(axis=0) @ m
        out.append(m)
    return np.stack(out)


@pytest.fixture
def setup(tiny_model64, tiny_images64):
    g = torch.Generator().manual_seed(9)
    t = 0.2 * torch.randn(3, P, P, generator=g, dtype=torch.float64)
    locs = np.array([0, 6, 15])
    labels = torch.tensor([0, 2, 1])
    return tiny_model64, tiny_images64, t, locs, labels


def test_loss_clean_matches_manual_ce(setup):
    model, x, _, _, y = setup
    with torch.no_grad():
        logits, _ = model(x)
        assert rel_err(loss_clean(model, x, y), manual_ce(logits, y)) < 1e-12


def test_loss_clean_empty_batch_is_zero(setup):
    model, x, _, _, y = setup
    assert float(loss_clean(model, x[:0], y[:0])) == 0.0


def test_backdoor_loss_equals_clean_loss_of_explicit_poison(setup):
    model, x, t, locs, _ = setup
    with torch.no_grad():
        bd = loss_backdoor(model, x, t, None, 1, locations=locs)
        ref = loss_clean(model, manual_poison(x, t, locs), torch.ones(3, dtype=torch.long))
    assert rel_err(bd, ref) < 1e-12


def test_backdoor_rejects_bad_target(setup):
    model, x, t, locs, _ = setup
    with pytest.raises(ValueError):
        loss_backdoor(model, x, t, None, 3, locations=locs)


def test_locations_or_rng_required(setup):
    model, x, t, _, _ = setup
    with pytest.raises(ValueError):
        loss_backdoor(model, x, t, default_mis(G), 0)
    with pytest.raises(ValueError):
        loss_backdoor(model, x, t, None, 0, locations=np.zeros(2, dtype=int))


def test_visual_loss_is_mean_trigger_norm(setup):
    _, x, t, locs, _ = setup
    # SUP without clipping: every sample differs by exactly t
    assert rel_err(loss_visual(x, t, None, locations=locs), torch.linalg.vector_norm(t)) < 1e-12


def test_attention_loss_matches_numpy_oracle(setup):
    model, x, t, locs, _ = setup
    with torch.no_grad():
        _, a_p = model(manual_poison(x, t, locs))
        _, a_c = model(x)
        for layer in (1, 2):
            diff = numpy_map(a_p, layer) - numpy_map(a_c, layer)
            ref = np.sqrt((diff ** 2).sum(axis=(1, 2))).mean()
            got = loss_attention(model, x, t, None, layer=layer, locations=locs)
            assert rel_err(got, ref) < 1e-10
            row = np.sqrt((diff[:, :1] ** 2).sum(axis=(1, 2))).mean()
            got = loss_attention(model, x, t, None, layer=layer, locations=locs, class_row_only=True)
            assert rel_err(got, row) < 1e-10


def test_attention_layer_bounds(setup):
    model, x, t, locs, _ = setup
    for bad in (0, 3):
        with pytest.raises(IndexError):
            loss_attention(model, x, t, None, layer=bad, locations=locs)


def test_zero_trigger_gives_zero_disparity(setup):
    model, x, t, locs, _ = setup
    with torch.no_grad():
        assert float(loss_attention(model, x, torch.zeros_like(t), None, locations=locs)) == 0.0
    m = torch.rand(2, 5, 5)
    assert torch.equal(disparity(m, m), torch.zeros(2))


def _param_indices(model):
    idx = []
    for name, p in model.named_parameters():
        flat = np.unravel_index(min(7, p.numel() - 1), p.shape)
        idx.append((name, p, tuple(int(i) for i in flat)))
    return idx


@pytest.mark.parametrize("term", ["bd", "attn"])
def test_losses_gradient_wrt_theta(setup, term):
    model, x, t, locs, _ = setup

    def f():
        if term == "bd":
            return loss_backdoor(model, x, t, None, 2, locations=locs)
        return loss_attention(model, x, t, None, locations=locs)

    model.zero_grad()
    f().backward()
    for name, p, i in _param_indices(model):
        num = central_diff(f, p.data, i, h=1e-5)
        # parameters outside the graph (e.g. the head for attention) get no gradient
        ana = 0.0 if p.grad is None else float(p.grad[i])
        assert abs(num - ana) <= 1e-6 + 1e-5 * abs(num), (term, name, num, ana)


def test_clean_loss_gradient_wrt_theta(setup):
    model, x, _, _, y = setup

    def f():
        return loss_clean(model, x, y)

    model.zero_grad()
    f().backward()
    for name, p, i in _param_indices(model):
        num = central_diff(f, p.data, i, h=1e-5)
        assert abs(num - float(p.grad[i])) <= 1e-6 + 1e-5 * abs(num), name


@pytest.mark.parametrize("term", ["bd", "vis", "attn"])
def test_losses_gradient_wrt_trigger(setup, term):
    model, x, t, locs, _ = setup
    t = t.clone().requires_grad_(True)

    def f():
        if term == "bd":
            return loss_backdoor(model, x, t, None, 2, locations=locs)
        if term == "vis":
            return loss_visual(x, t, None, locations=locs)
        return loss_attention(model, x, t, None, locations=locs)

    f().backward()
    for i in [(0, 0, 0), (1, 2, 3), (2, 3, 1)]:
        num = central_diff(f, t.data, i, h=1e-5)
        assert abs(num - float(t.grad[i])) <= 1e-6 + 1e-5 * abs(num), (term, i)


def test_weight_readings():
    w = LossWeights(0.3, 0.01)
    assert (w.visual, w.attention) == (0.3, 0.01)
    w = LossWeights(0.3, 0.01, reading="equation")
    assert (w.visual, w.attention) == (0.01, 0.3)
    with pytest.raises(ValueError):
        LossWeights(-1, 0)
    with pytest.raises(ValueError):
        LossWeights(1, 1, reading="other")


def test_trigger_objective_only_reaches_trigger(setup):
    model, x, t, locs, _ = setup
    t = t.clone().requires_grad_(True)
    w = LossWeights(0.5, 0.2)
    rep = trigger_objective(model, x, t, w, None, 1, locations=locs)
    rep.aggregate.backward()
    assert t.grad is not None and float(t.grad.abs().sum()) > 0
    assert all(p.grad is None for p in model.parameters())
    assert all(p.requires_grad for p in model.parameters())
    expect = rep.l_backdoor + 0.5 * rep.l_visual + 0.2 * rep.l_attention
    assert rel_err(rep.aggregate.detach(), expect.detach()) < 1e-12
    # zero clean-loss slot and the terms agree with the stand-alone losses
    assert float(rep.l_clean) == 0.0
    with torch.no_grad():
        assert rel_err(rep.l_backdoor, loss_backdoor(model, x, t, None, 1, locations=locs)) < 1e-12
        assert rel_err(rep.l_attention, loss_attention(model, x, t, None, locations=locs)) < 1e-12


def test_trigger_objective_without_attention(setup):
    model, x, t, locs, _ = setup
    w = LossWeights(0.5, 0.2)
    rep = trigger_objective(model, x, t, w, None, 1, locations=locs, attention_term=False)
    assert rel_err(rep.aggregate, rep.l_backdoor + 0.5 * rep.l_visual) < 1e-12


def test_model_objective_only_reaches_theta(setup):
    model, x, t, locs, y = setup
    t = t.clone().requires_grad_(True)
    w = LossWeights(0.5, 0.2)
    model.zero_grad()
    rep = model_objective(model, x, y, x, t, w, None, 1, locations=locs)
    rep.aggregate.backward()
    assert t.grad is None
    assert any(float(p.grad.abs().sum()) > 0 for p in model.parameters())
    assert rel_err(rep.aggregate, rep.l_clean + rep.l_backdoor + 0.2 * rep.l_attention) < 1e-12


def test_model_objective_gradient_matches_finite_difference(setup):
    model, x, t, locs, y = setup
    w = LossWeights(0.5, 0.2)

    def f():
        return model_objective(model, x, y, x, t, w, None, 1, locations=locs).aggregate

    model.zero_grad()
    f().backward()
    for name, p, i in _param_indices(model):
        num = central_diff(f, p.data, i, h=1e-5)
        assert abs(num - float(p.grad[i])) <= 1e-6 + 1e-5 * abs(num), name


def test_model_objective_without_poison(setup):
    model, x, t, _, y = setup
    rep = model_objective(model, x, y, x[:0], t, LossWeights(), None, 1, locations=np.zeros(0, dtype=int))
    assert rel_err(rep.aggregate, loss_clean(model, x, y)) < 1e-12


def test_single_level_is_sum_of_both_phases(setup):
    model, x, t, locs, y = setup
    w = LossWeights(0.5, 0.2)
    with torch.no_grad():
        joint = single_level_objective(model, x, y, x, t, w, None, 1, locations=locs).aggregate
        trig = trigger_objective(model, x, t, w, None, 1, locations=locs)
        mod = model_objective(model, x, y, x, t, w, None, 1, locations=locs)
    expect = trig.aggregate + mod.aggregate - trig.l_backdoor - 0.2 * trig.l_attention
    assert rel_err(joint, expect) < 1e-12


def test_single_level_reaches_both(setup):
    model, x, t, locs, y = setup
    t = t.clone().requires_grad_(True)
    model.zero_grad()
    single_level_objective(model, x, y, x, t, LossWeights(0.5, 0.2), None, 1,
                           locations=locs).aggregate.backward()
    assert float(t.grad.abs().sum()) > 0
    assert any(float(p.grad.abs().sum()) > 0 for p in model.parameters())


def test_frozen_restores_flags(tiny_model64):
    next(tiny_model64.parameters()).requires_grad_(False)
    before = [p.requires_grad for p in tiny_model64.parameters()]
    with frozen(tiny_model64):
        assert not any(p.requires_grad for p in tiny_model64.parameters())
    assert [p.requires_grad for p in tiny_model64.parameters()] == before


def test_sampled_locations_are_reported(setup):
    model, x, t, _, _ = setup
    rng = np.random.default_rng(0)
    rep = trigger_objective(model, x, t, LossWeights(), FixedLocation((2, 1)), 0, rng=rng)
    assert rep.locations.tolist() == [2 * G + 1] * 3
