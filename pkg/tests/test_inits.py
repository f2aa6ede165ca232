"""Initialization schemes: donor-derived draws, BN variants, conv1 overlay."""

import numpy as np
import pytest

from transferlab.gabor import GaborConfig, gabor_bank, scale_to_match
from transferlab.inits import (
    BN_ROLES,
    WEIGHT_ROLES,
    apply_conv1_gabor,
    bn_variant_init,
    init_store,
    random_init,
)
from transferlab.models import build_cbr, conv_layer_names, tensor_specs


def ks_statistic(a, b):
    """Two-sample Kolmogorov-Smirnov distance, straight from the CDF
    definition: max gap between empirical CDFs over the merged support."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def weight_names(store):
    return [n for n, r in store.roles.items() if r in WEIGHT_ROLES]


def bn_names(store):
    return [n for n, r in store.roles.items() if r in BN_ROLES]


@pytest.fixture()
def donor(tiny_graph):
    return init_store(tiny_graph, "random", seed=900)


def test_random_init_is_deterministic(tiny_graph):
    a = init_store(tiny_graph, "random", seed=5)
    b = init_store(tiny_graph, "random", seed=5)
    assert a.digest() == b.digest()
    assert init_store(tiny_graph, "random", seed=6).digest() != a.digest()


def test_random_init_shapes_and_bn_identity(tiny_graph, tiny_store):
    for name, shape, role in tensor_specs(tiny_graph):
        arr = tiny_store[name]
        assert arr.shape == shape and arr.dtype == np.float32
        if role == "gamma" or role == "moving_var":
            assert np.all(arr == 1.0)
        elif role == "beta" or role == "moving_mean":
            assert np.all(arr == 0.0)
        elif role == "dense_bias":
            assert np.all(arr == 0.0)


def test_random_init_fanin_scaling(tiny_graph, tiny_store):
    for name, shape, role in tensor_specs(tiny_graph):
        if role == "kernel":
            fan_in = shape[0] * shape[1] * shape[2]
            target = np.sqrt(2.0 / fan_in)
            got = float(np.std(tiny_store[name]))
            # truncation at 2 std pulls the std a bit under the nominal value
            assert 0.5 * target < got <= target
        elif role == "dense_weight":
            bound = 1.0 / np.sqrt(shape[0])
            assert float(np.max(np.abs(tiny_store[name]))) <= bound


def test_meanvar_matches_donor_moments(tiny_graph, donor):
    store = init_store(tiny_graph, "meanvar", seed=11, donor=donor)
    for name in weight_names(store):
        src = donor[name].astype(np.float64)
        drawn = store[name].astype(np.float64)
        assert drawn.shape == src.shape
        sigma = float(src.std())
        tol = 4.0 * sigma / np.sqrt(src.size) + 1e-7
        assert abs(float(drawn.mean()) - float(src.mean())) <= tol
        if src.size > 1000:
            assert float(drawn.std()) == pytest.approx(sigma, rel=0.1)


def test_meanvar_zero_variance_donor_is_exact(tiny_graph, donor):
    name = "conv2/kernel"
    donor.entries[name][...] = 0.625
    store = init_store(tiny_graph, "meanvar", seed=3, donor=donor)
    assert np.all(store[name] == np.float32(0.625))


def test_sampling_support_containment(tiny_graph, donor):
    store = init_store(tiny_graph, "sample", seed=21, donor=donor)
    for name in weight_names(store):
        support = np.unique(donor[name].ravel())
        assert np.isin(store[name].ravel(), support).all()


def test_sampling_distribution_close_to_donor(tiny_graph, donor):
    store = init_store(tiny_graph, "sample", seed=21, donor=donor)
    name = max(weight_names(store), key=lambda n: donor[n].size)
    assert donor[name].size > 50_000
    assert ks_statistic(donor[name], store[name]) < 0.01


def test_shuffle_preserves_each_layer_multiset(tiny_graph, donor):
    store = init_store(tiny_graph, "shuffle", seed=33, donor=donor)
    moved = 0
    for name in weight_names(store):
        a = np.sort(donor[name].ravel())
        b = np.sort(store[name].ravel())
        assert a.tobytes() == b.tobytes()
        if store[name].tobytes() != donor[name].tobytes():
            moved += 1
    assert moved > 0


def test_donor_schemes_require_matching_donor(tiny_graph, donor):
    for scheme in ("meanvar", "sample", "shuffle"):
        with pytest.raises(ValueError, match="donor"):
            init_store(tiny_graph, scheme, seed=1)
    other = build_cbr("cbr-small-desk", (48, 48, 3), 3)
    mismatched = init_store(other, "random", seed=1)
    with pytest.raises(ValueError, match="fingerprint"):
        init_store(tiny_graph, "meanvar", seed=1, donor=mismatched)


def test_unknown_scheme_and_bn_variant_rejected(tiny_graph, tiny_store, donor):
    with pytest.raises(ValueError, match="unknown init scheme"):
        init_store(tiny_graph, "xavier", seed=1)
    with pytest.raises(ValueError, match="unknown BN variant"):
        bn_variant_init("bn-magic", tiny_graph, tiny_store, donor=donor)


def test_bn_transfer_copies_donor_stats(tiny_graph, donor):
    for name in bn_names(donor):
        donor.entries[name] = np.random.default_rng(8).normal(
            0.4, 0.2, donor[name].shape
        ).astype(np.float32)
    store = init_store(tiny_graph, "meanvar", seed=2, donor=donor, bn_variant="bn-transfer")
    for name in bn_names(store):
        assert store[name].tobytes() == donor[name].tobytes()


def test_bn_meanvar_draws_and_clips_variances(tiny_graph, donor):
    gen = np.random.default_rng(9)
    for name in bn_names(donor):
        donor.entries[name] = gen.normal(0.05, 0.3, donor[name].shape).astype(np.float32)
    store = init_store(tiny_graph, "meanvar", seed=2, donor=donor, bn_variant="bn-meanvar")
    changed = 0
    for name, role in store.roles.items():
        if role not in BN_ROLES:
            continue
        if role == "moving_var":
            assert np.all(store[name] >= 0.0)
        if store[name].tobytes() != donor[name].tobytes():
            changed += 1
    assert changed == len(bn_names(store))


def test_bn_identity_after_donor_scheme(tiny_graph, donor):
    store = init_store(tiny_graph, "sample", seed=4, donor=donor)
    for name, role in store.roles.items():
        if role in ("gamma", "moving_var"):
            assert np.all(store[name] == 1.0)
        elif role in ("beta", "moving_mean"):
            assert np.all(store[name] == 0.0)


def test_gabor_overlay_replaces_only_conv1(tiny_graph):
    plain = init_store(tiny_graph, "random", seed=17)
    overlaid = init_store(tiny_graph, "gabor-conv1", seed=17)
    conv1 = conv_layer_names(tiny_graph)[0]
    kname = f"{conv1}/kernel"
    assert overlaid[kname].tobytes() != plain[kname].tobytes()
    for name in plain.names():
        if name != kname:
            assert overlaid[name].tobytes() == plain[name].tobytes()


def test_gabor_overlay_structure_and_scale(tiny_graph, donor):
    overlaid = init_store(tiny_graph, "gabor-conv1", seed=17, donor=donor)
    conv1 = conv_layer_names(tiny_graph)[0]
    kernel = overlaid[f"{conv1}/kernel"]
    k, _, c_in, c_out = kernel.shape
    # grayscale: identical across input channels
    for c in range(1, c_in):
        assert kernel[:, :, c, :].tobytes() == kernel[:, :, 0, :].tobytes()
    reference = donor[f"{conv1}/kernel"]
    bank = gabor_bank(GaborConfig(kernel_crop=k))[:c_out]
    expected = np.repeat(bank.transpose(1, 2, 0)[:, :, None, :], c_in, axis=2)
    expected = scale_to_match(expected, reference.astype(np.float64))
    np.testing.assert_array_equal(kernel, expected.astype(np.float32))
    assert float(np.std(kernel)) == pytest.approx(float(np.std(reference)), rel=1e-5)


def test_gabor_overlay_rejects_mismatched_config(tiny_graph, tiny_store):
    with pytest.raises(ValueError, match="does not match conv1"):
        apply_conv1_gabor(tiny_store, tiny_graph, GaborConfig(kernel_crop=7))
    starved = GaborConfig(n_angles=2, sigmas=(2.0,), frequencies=(0.1,), kernel_crop=5)
    with pytest.raises(ValueError, match="needs"):
        apply_conv1_gabor(tiny_store, tiny_graph, starved)


def test_store_setitem_guards(tiny_store):
    with pytest.raises(KeyError):
        tiny_store["conv9/kernel"] = np.zeros((1,))
    with pytest.raises(ValueError, match="shape"):
        tiny_store["conv1/kernel"] = np.zeros((3, 3, 3, 16), dtype=np.float32)
    before = tiny_store.digest()
    tiny_store["conv1/kernel"] = tiny_store["conv1/kernel"] + 1.0
    assert tiny_store.digest() != before


def test_store_copy_is_independent(tiny_store):
    clone = tiny_store.copy()
    clone.entries["conv1/kernel"][...] = 0.0
    assert not np.all(tiny_store["conv1/kernel"] == 0.0)
