import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from pasta_vit.evaluation import (PayloadSpec, TREHeatmap, accuracy, asr, attention_stealth,
                                  eligible, emit_heatmap, poison_with_payload, psnr, read_heatmap,
                                  read_pgm, ssim, tre_heatmap, visual_stealth)
from pasta_vit.vit import init_model

from conftest import TINY, make_set


# ---------- independent oracles ----------

def loop_ssim_map(a, b, size=11, sigma=1.5, peak=1.0):
    """SSIM at every pixel from explicit windowed sums, symmetric padding."""
    r = size // 2
    x = np.arange(size) - r
    w1 = np.exp(-x**2 / (2 * sigma**2))
    w = np.outer(w1, w1)
    w /= w.sum()
    pa = np.pad(a, r, mode="symmetric")
    pb = np.pad(b, r, mode="symmetric")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    out = np.zeros_like(a)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            wa = pa[i:i + size, j:j + size]
            wb = pb[i:i + size, j:j + size]
            ma, mb = (w * wa).sum(), (w * wb).sum()
            va = (w * (wa - ma) ** 2).sum()
            vb = (w * (wb - mb) ** 2).sum()
            cv = (w * (wa - ma) * (wb - mb)).sum()
            out[i, j] = ((2 * ma * mb + c1) * (2 * cv + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return out


class StubModel:
    """Predicts ``target`` whenever any pixel exceeds ``threshold``; class 0 otherwise."""

    def __init__(self, config, target, threshold):
        self.config = config
        self.target = target
        self.threshold = threshold

    def __call__(self, x, keep_attention=True):
        hit = (x.flatten(1).amax(dim=1) > self.threshold).long()
        logits = torch.zeros(x.shape[0], self.config.num_classes)
        logits[torch.arange(x.shape[0]), hit * self.target] = 1.0
        return logits, []

    def eval(self):
        return self


@pytest.fixture
def flat_set():
    # every pixel at 0.5 in display units; normalised value 0
    n = 8
    labels = [0, 1, 2, 0, 2, 0, 1, 0]
    return make_set(torch.zeros(n, 3, 16, 16), labels)


# ---------- PSNR / SSIM ----------

def test_psnr_known_value():
    a = np.zeros((4, 4))
    b = np.full((4, 4), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == math.inf


def test_ssim_identity():
    a = np.random.default_rng(0).random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a = rng.random((8, 8))
    b = np.clip(a + 0.1 * rng.standard_normal((8, 8)), 0, 1)
    ref = loop_ssim_map(a, b).mean()
    assert ssim(a, b) == pytest.approx(ref, abs=1e-12)


def test_ssim_interior_matches_scikit_image():
    rng = np.random.default_rng(2)
    a = rng.random((32, 32))
    b = np.clip(a + 0.05 * rng.standard_normal((32, 32)), 0, 1)
    _, smap = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, full=True)
    ours = loop_ssim_map(a, b)
    # borders differ only by the padding convention
    np.testing.assert_allclose(ours[5:-5, 5:-5], smap[5:-5, 5:-5], atol=1e-7)


def test_ssim_channel_average_and_shape_check():
    rng = np.random.default_rng(3)
    a, b = rng.random((2, 12, 12)), rng.random((2, 12, 12))
    assert ssim(a, b) == pytest.approx((ssim(a[0], b[0]) + ssim(a[1], b[1])) / 2)
    with pytest.raises(ValueError):
        ssim(a, b[:1])


# ---------- payloads and poisoning ----------

def test_payload_parse():
    assert PayloadSpec.parse("fixed:k=10").k == 10
    p = PayloadSpec.parse("fixed:3,2;0,0", seed=4)
    assert p.k == 2 and p.locations == ((3, 2), (0, 0)) and p.seed == 4
    assert PayloadSpec.parse("random:k=20").mode == "random"
    assert PayloadSpec.parse("random:k=2").label() == "Random 2 TALs"
    for bad in ("other:k=1", "fixed:k=0"):
        with pytest.raises(ValueError):
            PayloadSpec.parse(bad)
    with pytest.raises(ValueError):
        PayloadSpec("fixed", 2, ((0, 0),))


def test_selection_rows_have_k_ones():
    for p in (PayloadSpec("fixed", 5), PayloadSpec("random", 5, seed=2)):
        sel = p.selection(6, 4)
        assert sel.shape == (6, 16)
        assert torch.equal(sel.sum(dim=1), torch.full((6,), 5.0))
    fixed = PayloadSpec("fixed", 5).selection(6, 4)
    assert torch.equal(fixed, fixed[:1].expand(6, -1))
    rnd = PayloadSpec("random", 5, seed=2).selection(50, 4)
    assert len({tuple(r.tolist()) for r in rnd}) > 1
    with pytest.raises(ValueError):
        PayloadSpec("fixed", 17).selection(1, 4)


def test_sup_payload_single_patch(flat_set):
    t = torch.full((3, 4, 4), 0.4)
    x = poison_with_payload(flat_set, flat_set.images[:2], t, PayloadSpec("fixed", 1, ((1, 2),)))
    expect = torch.zeros(2, 3, 16, 16)
    expect[..., 4:8, 8:12] = 0.4
    assert torch.equal(x, expect)


def test_payload_clamps_to_valid_pixels(flat_set):
    t = torch.full((3, 4, 4), 10.0)
    x = poison_with_payload(flat_set, flat_set.images[:1], t, PayloadSpec("fixed", 1, ((0, 0),)))
    assert float(x.max()) == pytest.approx(2.0)   # (1 - 0.5) / 0.25
    raw = poison_with_payload(flat_set, flat_set.images[:1], t, PayloadSpec("fixed", 1, ((0, 0),)),
                              clamp=False)
    assert float(raw.max()) == 10.0


def test_rep_payload_replaces_pixels(flat_set):
    images = torch.full((1, 3, 16, 16), 1.0)
    t = torch.full((3, 4, 4), -1.0)
    x = poison_with_payload(flat_set, images, t, PayloadSpec("fixed", 1, ((3, 3),)), insertion="rep")
    assert float(x[..., 12:, 12:].max()) == -1.0
    assert float(x[..., :12, :].min()) == 1.0
    with pytest.raises(ValueError):
        poison_with_payload(flat_set, images, t, PayloadSpec(), insertion="blend")


def test_whole_image_payload_equals_global_addition(flat_set):
    g = torch.Generator().manual_seed(0)
    t = 0.3 * torch.randn(3, 4, 4, generator=g)
    x = flat_set.images[:3]
    got = poison_with_payload(flat_set, x, t, PayloadSpec("random", 16, seed=1), clamp=False)
    assert torch.allclose(got, x + t.repeat(1, 4, 4))


# ---------- accuracy / ASR / TRE ----------

def test_eligible_excludes_target(flat_set):
    ev = eligible(flat_set, 0)
    assert 0 not in ev.labels.tolist() and len(ev) == 4
    with pytest.raises(ValueError):
        eligible(make_set(torch.zeros(2, 3, 16, 16), [1, 1]), 1)


def test_asr_with_stub(flat_set):
    stub = StubModel(TINY, target=2, threshold=0.5)
    t = torch.full((3, 4, 4), 1.0)
    assert asr(stub, t, flat_set, PayloadSpec("fixed", 1), 2) == 1.0
    assert asr(stub, torch.zeros(3, 4, 4), flat_set, PayloadSpec("fixed", 1), 2) == 0.0


def test_tre_all_correct_stub_gives_ones(flat_set):
    stub = StubModel(TINY, target=1, threshold=0.5)
    h = tre_heatmap(stub, torch.full((3, 4, 4), 1.0), flat_set, 1)
    assert h.grid.shape == (4, 4)
    assert np.all(h.grid == 1.0) and h.tre == 1.0


def test_tre_is_mean_of_per_patch_asr(tiny_data):
    model = init_model(TINY, 0)
    g = torch.Generator().manual_seed(0)
    t = torch.randn(3, 4, 4, generator=g)
    test = tiny_data[1]
    h = tre_heatmap(model, t, test, 1)
    for r, c in ((0, 0), (2, 3)):
        assert h.grid[r, c] == asr(model, t, test, PayloadSpec("fixed", 1, ((r, c),)), 1)
    assert h.tre == pytest.approx(h.grid.mean())


def test_accuracy_with_stub(flat_set):
    stub = StubModel(TINY, target=1, threshold=0.5)
    assert accuracy(stub, flat_set) == pytest.approx(4 / 8)
    with pytest.raises(ValueError):
        accuracy(stub, flat_set.subset([]))


# ---------- stealth ----------

def test_visual_stealth_single_patch(flat_set):
    t = torch.full((3, 4, 4), 0.4)   # 0.1 in display units
    vs = visual_stealth(flat_set, t, PayloadSpec("fixed", 1, ((0, 0),)))
    assert vs.l2 == pytest.approx(0.1 * math.sqrt(48), rel=1e-6)
    mse = 48 * 0.01 / (3 * 256)
    assert vs.psnr_db == pytest.approx(10 * math.log10(1 / mse), rel=1e-6)
    assert 0 < vs.ssim < 1
    assert len(vs.per_image["l2"]) == len(flat_set)


def test_attention_stealth_zero_trigger(tiny_data):
    model = init_model(TINY, 0)
    st = attention_stealth(model, tiny_data[1].subset(range(5)), torch.zeros(3, 4, 4), PayloadSpec())
    assert st.l2 == 0.0 and st.ares == 0.0 and st.apsnr_db == math.inf


def test_attention_stealth_nonzero(tiny_data):
    model = init_model(TINY, 0)
    st = attention_stealth(model, tiny_data[1].subset(range(5)), torch.full((3, 4, 4), 2.0),
                           PayloadSpec("fixed", 4))
    assert st.l2 > 0 and st.ares > 0 and math.isfinite(st.apsnr_db)
    with pytest.raises(IndexError):
        attention_stealth(model, tiny_data[1], torch.zeros(3, 4, 4), PayloadSpec(), layer=3)


# ---------- heatmap files ----------

def test_heatmap_round_trip(tmp_path):
    grid = np.arange(16).reshape(4, 4) / 15
    h = TREHeatmap.from_grid(grid)
    csv_path, pgm_path = emit_heatmap(h, tmp_path / "l2_0.5")
    assert csv_path.name == "l2_0.5.csv" and pgm_path.name == "l2_0.5.pgm"
    back = read_heatmap(csv_path)
    np.testing.assert_allclose(back.grid, grid, atol=5e-7)
    pix = read_pgm(pgm_path)
    assert pix[0, 0] == 0 and pix[3, 3] == 255 and pix.shape == (4, 4)


def test_heatmap_vmax(tmp_path):
    h = TREHeatmap.from_grid(np.full((2, 3), 0.25))
    _, pgm = emit_heatmap(h, tmp_path / "m", vmax=0.5)
    assert np.all(read_pgm(pgm) == 128)
    with pytest.raises(ValueError):
        emit_heatmap(h, tmp_path / "m", vmax=0)
