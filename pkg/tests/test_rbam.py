import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, rbfrm_bruteforce, relative_error, softmax3
from rbae import rbam
from rbae.rbam import (
    FFM,
    RBAM,
    RepairBundle,
    extract_patches,
    feature_repair_loss,
    ffm_fuse,
    fold_patches,
    patch_similarity,
    rbfrm_repair,
    repair_pyramid,
    repaired_pyramid,
    save_repair_panels,
)


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# ------------------------------------------------------------------ patch repair


def test_patches_fold_back_exactly(rng):
    x = _t(rng.normal(size=(2, 3, 8, 8)))
    for K in (1, 2, 4, 8):
        assert torch.equal(fold_patches(extract_patches(x, K), K, (8, 8)), x)


def test_patch_size_must_divide():
    with pytest.raises(ValueError, match="divisible"):
        extract_patches(torch.zeros(1, 1, 6, 6), 4)


def test_similarity_rows_are_stochastic(rng):
    for _ in range(20):
        F_def, F_ref = _t(rng.normal(size=(2, 3, 8, 8))), _t(rng.normal(size=(2, 3, 8, 8)))
        S, S_norm = patch_similarity(F_def, F_ref, 2)
        assert torch.all(S <= 1 + 1e-9) and torch.all(S >= -1 - 1e-9)
        np.testing.assert_allclose(S_norm.sum(-1).numpy(), 1.0, atol=1e-6)


def test_repair_stays_in_reference_hull(rng):
    # each repaired patch is a convex combination of reference patches, so every
    # coordinate lies between the per-coordinate min and max over reference patches
    for _ in range(1000):
        C, H, K = int(rng.integers(1, 4)), 4, int(rng.choice([1, 2, 4]))
        F_def = _t(rng.normal(size=(1, C, H, H)))
        F_ref = _t(rng.normal(size=(1, C, H, H)))
        out = extract_patches(rbfrm_repair(F_def, F_ref, K), K)[0]
        ref = extract_patches(F_ref, K)[0]
        assert torch.all(out >= ref.min(0).values - 1e-12)
        assert torch.all(out <= ref.max(0).values + 1e-12)


def test_single_patch_returns_reference_exactly(rng):
    F_def, F_ref = _t(rng.normal(size=(1, 3, 4, 4))), _t(rng.normal(size=(1, 3, 4, 4)))
    assert torch.equal(rbfrm_repair(F_def, F_ref, 4), F_ref)


def test_equidistant_references_average():
    # query along (1, 1); the two references (1, 0) and (0, 1) are both at cosine 1/sqrt(2)
    F_def = _t([[[[1.0, 1.0]]]]).permute(0, 3, 1, 2)  # (1, 2, 1, 1)
    b1, b2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    F_ref = _t(np.stack([b1, b2], axis=-1)[None, :, None, :])  # (1, 2, 1, 2) -> two 1x1 patches
    F_def = F_def.expand(1, 2, 1, 2).contiguous()
    out = rbfrm_repair(F_def, F_ref, 1)
    np.testing.assert_allclose(out[0, :, 0, 0].numpy(), (b1 + b2) / 2, atol=1e-12)


def test_scalar_toy_matches_bruteforce():
    F_def = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    F_ref = np.array([[[2.0, 0.0], [0.0, 2.0]]])
    out = rbfrm_repair(_t(F_def[None]), _t(F_ref[None]), 1)[0].numpy()
    np.testing.assert_allclose(out, rbfrm_bruteforce(F_def, F_ref, 1), atol=1e-9, rtol=0)
    # hand value: unit query vs refs {1, 0, 0, 1} (zero refs have cosine 0)
    w = math.e / (2 * math.e + 2)
    np.testing.assert_allclose(out[0, 0, 0], 2 * 2 * w, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_random_maps_match_bruteforce(seed, K, C):
    g = np.random.default_rng(seed)
    F_def, F_ref = g.normal(size=(C, 4, 4)), g.normal(size=(C, 4, 4))
    out = rbfrm_repair(_t(F_def[None]), _t(F_ref[None]), K)[0].numpy()
    np.testing.assert_allclose(out, rbfrm_bruteforce(F_def, F_ref, K), atol=1e-9, rtol=0)


def test_reference_is_shared_across_batch(rng):
    F_def = _t(rng.normal(size=(3, 2, 4, 4)))
    F_ref = _t(rng.normal(size=(1, 2, 4, 4)))
    out = rbfrm_repair(F_def, F_ref, 2)
    for b in range(3):
        assert torch.allclose(out[b : b + 1], rbfrm_repair(F_def[b : b + 1], F_ref, 2))


def test_zero_patches_are_counted():
    rbam.diagnostics.clear()
    F_def = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
    out = rbfrm_repair(F_def, torch.ones(1, 2, 4, 4, dtype=torch.float64), 2)
    assert torch.isfinite(out).all()
    assert rbam.diagnostics["zero_patches"] == 4


def test_rbfrm_gradient_matches_finite_differences(rng):
    F_def = rng.normal(size=(1, 2, 4, 4))
    F_ref = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(1, 2, 4, 4))

    def f_def(x):
        return float((rbfrm_repair(_t(x), _t(F_ref), 2) * _t(w)).sum())

    def f_ref(x):
        return float((rbfrm_repair(_t(F_def), _t(x), 2) * _t(w)).sum())

    a, b = _t(F_def).requires_grad_(), _t(F_ref).requires_grad_()
    (rbfrm_repair(a, b, 2) * _t(w)).sum().backward()
    assert relative_error(a.grad.numpy(), central_difference(f_def, F_def.copy())) < 1e-3
    assert relative_error(b.grad.numpy(), central_difference(f_ref, F_ref.copy())) < 1e-3


# ------------------------------------------------------------------ fusion


def test_uniform_logits_give_mean(rng):
    F = [_t(rng.normal(size=(2, 3, 4, 4))) for _ in range(3)]
    z = torch.zeros_like(F[0])
    fused, attn = ffm_fuse(F[0], F[1], F[2], (z, z, z))
    assert torch.allclose(fused, (F[0] + F[1] + F[2]) / 3, atol=1e-15)
    assert torch.all(attn == 1 / 3)


def test_single_element_softmax_weights():
    one = torch.ones(1, 1, 1, 1, dtype=torch.float64)
    zero = torch.zeros_like(one)
    _, attn = ffm_fuse(zero, zero, zero, (one, zero, zero))
    expected = softmax3(1.0, 0.0, 0.0)
    np.testing.assert_allclose(attn.flatten().numpy(), expected, atol=1e-12)
    np.testing.assert_allclose(expected, (0.5761, 0.2119, 0.2119), atol=1e-4)


def test_attention_sums_to_one_with_module(rng):
    torch.manual_seed(0)
    ffm = FFM(3, mid_channels=4).double()
    F = [_t(rng.normal(size=(2, 3, 6, 6))) for _ in range(3)]
    _, attn = ffm_fuse(*F, ffm.logits(*F))
    np.testing.assert_allclose(attn.sum(0).detach().numpy(), 1.0, atol=1e-6)
    assert ffm(*F).shape == F[0].shape


def test_ffm_rejects_shape_mismatch():
    a = torch.zeros(1, 2, 4, 4)
    with pytest.raises(ValueError):
        ffm_fuse(a, a, torch.zeros(1, 2, 2, 2), (a, a, a))


def test_ffm_gradient_matches_finite_differences(rng):
    torch.manual_seed(3)
    ffm = FFM(2, mid_channels=3, kernel=3).double()
    F = [rng.normal(size=(1, 2, 4, 4)) for _ in range(3)]
    w = _t(rng.normal(size=(1, 2, 4, 4)))
    for i in range(3):

        def f(x, i=i):
            args = [_t(a) for a in F]
            args[i] = _t(x)
            with torch.no_grad():
                return float((ffm(*args) * w).sum())

        args = [_t(a).requires_grad_() for a in F]
        (ffm(*args) * w).sum().backward()
        numeric = central_difference(f, F[i].copy())
        assert relative_error(args[i].grad.numpy(), numeric) < 1e-3


# ------------------------------------------------------------------ module and pyramid


def _pyramid(rng, widths=(2, 2, 3, 3, 3), size=64, batch=1):
    return [_t(rng.normal(size=(batch, c, size >> (i + 1), size >> (i + 1)))) for i, c in enumerate(widths)]


def test_rbam_clamps_patch_size():
    m = RBAM(3, feature_size=2, patch_sizes=(2, 4))
    assert (m.k_small, m.k_large) == (2, 2)
    with pytest.raises(ValueError, match="divide"):
        RBAM(3, feature_size=6, patch_sizes=(2, 4))


def test_repair_pyramid_structure(rng):
    rbams = torch.nn.ModuleDict({str(l): RBAM(3, 64 >> l, mid_channels=4).double() for l in (3, 4, 5)})
    pyr_def, pyr_ref = _pyramid(rng, batch=2), _pyramid(rng)
    bundles = repair_pyramid(rbams, pyr_def, pyr_ref)
    assert sorted(bundles) == [3, 4, 5]
    out = repaired_pyramid(pyr_def, bundles)
    assert out[0] is pyr_def[0] and out[1] is pyr_def[1]
    for level in (3, 4, 5):
        assert out[level - 1] is bundles[level].F_fused
        assert bundles[level].F_orig is pyr_def[level - 1]


def test_repair_pyramid_rejects_mismatched_schedules(rng):
    rbams = torch.nn.ModuleDict({str(l): RBAM(3, 64 >> l, mid_channels=4).double() for l in (3, 4, 5)})
    with pytest.raises(ValueError, match="schedules"):
        repair_pyramid(rbams, _pyramid(rng), _pyramid(rng, widths=(2, 2, 4, 3, 3)))


def test_save_repair_panels(rng, tmp_path):
    rbams = torch.nn.ModuleDict({str(l): RBAM(3, 64 >> l, mid_channels=4).double() for l in (3, 4, 5)})
    bundles = repair_pyramid(rbams, _pyramid(rng), _pyramid(rng))
    save_repair_panels(bundles, tmp_path / "p.png")
    assert (tmp_path / "p.png").exists()


# ------------------------------------------------------------------ feature repair loss


def _bundle(fused):
    return RepairBundle(fused, fused, fused, fused)


def test_repair_loss_zero_when_equal(rng):
    pyr = _pyramid(rng)
    bundles = {l: _bundle(pyr[l - 1]) for l in (3, 4, 5)}
    assert feature_repair_loss(bundles, pyr).item() == 0.0


def test_repair_loss_positive_on_any_difference(rng):
    pyr = _pyramid(rng)
    changed = pyr[4].clone()
    changed[0, 0, 0, 0] += 1e-3
    bundles = {3: _bundle(pyr[2]), 4: _bundle(pyr[3]), 5: _bundle(changed)}
    assert feature_repair_loss(bundles, pyr).item() > 0


def test_repair_loss_hand_case():
    fused = torch.tensor([1.0, 2.0], dtype=torch.float64).view(1, 2, 1, 1)
    clean = torch.tensor([0.0, 2.0], dtype=torch.float64).view(1, 2, 1, 1)
    # only level 3 differs; levels 4 and 5 are repaired perfectly
    bundles = {3: _bundle(fused), 4: _bundle(clean), 5: _bundle(clean)}
    pyr = [None, None, clean, clean, clean]
    # squared norm 1, scaled by 1 / (l2 - l1) = 1/2
    assert feature_repair_loss(bundles, pyr, reduction="sum").item() == pytest.approx(0.5, abs=1e-12)
    # element-mean convention used in training: 1/2 per element, then the same 1/2
    assert feature_repair_loss(bundles, pyr).item() == pytest.approx(0.25, abs=1e-12)


def test_repair_loss_unknown_reduction(rng):
    pyr = _pyramid(rng)
    with pytest.raises(ValueError):
        feature_repair_loss({l: _bundle(pyr[l - 1]) for l in (3, 4, 5)}, pyr, reduction="max")
