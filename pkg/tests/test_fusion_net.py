import math

import numpy as np
import pytest

import parity
import reference as ref
from dronefuse import tensor as T
from dronefuse.errors import ConfigurationError, DiagnosticError, ParameterError
from dronefuse.fusion_net import (ABLATIONS, OOD_LABEL, ClassStats, FusionNet, Mmff, Mmfi, NetConfig, OodPolicy,
                                  Smff, TfiBranch, ZcBranch, afw_apply, afw_stats, afw_weights, calibrate_policy,
                                  classify, ood_decide, stats_from_means, zc_grid)
from dronefuse.tensor import shuffle_permutation
from gradcases import TOLERANCE, full_network

SMALL = dict(channels=8, spatial=2, tfi_hw=16, depth=2, zc_cols=16)


def t(a):
    return T.tensor(np.asarray(a, dtype=np.float64))


@pytest.mark.parametrize("name", sorted({**parity.BLOCKS, **parity.BRANCHES}))
def test_reference_parity(name):
    fn = {**parity.BLOCKS, **parity.BRANCHES}[name]
    assert max(fn(seed) for seed in range(20)) < 1e-6


class TestBranches:
    def test_desk_shapes_align(self):
        cfg = NetConfig()
        rng = np.random.default_rng(0)
        f_tfi = TfiBranch(1, cfg, rng)(t(rng.random((2, 32, 32, 1))))
        f_zc = ZcBranch(cfg, rng)(t(zc_grid(rng.random((2, 6, 64)), cfg.zc_padded_rows)))
        assert f_tfi.shape == f_zc.shape == (2, 4, 4, 32)

    @pytest.mark.parametrize("kw", [dict(channels=8, spatial=2, tfi_hw=16, depth=2, zc_cols=16),
                                    dict(channels=16, spatial=3, tfi_hw=24, depth=3, zc_rows=10, zc_cols=8)])
    def test_alignment_across_configs(self, kw):
        cfg = NetConfig(**kw)
        rng = np.random.default_rng(1)
        a = TfiBranch(1, cfg, rng)(t(rng.random((1, cfg.tfi_hw, cfg.tfi_hw, 1))))
        b = ZcBranch(cfg, rng)(t(zc_grid(rng.random((1, cfg.zc_rows, cfg.zc_cols)), cfg.zc_padded_rows)))
        assert a.shape == b.shape == (1, cfg.spatial, cfg.spatial, cfg.channels)

    def test_zero_input_is_finite(self):
        net = FusionNet(NetConfig(**SMALL), seed=0).eval()
        out = net(np.zeros((2, 16, 16, 1)), np.zeros((2, 6, 16)))
        assert np.all(np.isfinite(out.data))

    def test_zc_grid_padding(self):
        vals = np.arange(2 * 6 * 2, dtype=float).reshape(2, 6, 2)
        grid = zc_grid(vals, 9)
        assert grid.shape == (2, 3, 3, 2)
        assert np.array_equal(grid[0, 0, 1], vals[0, 1])
        assert np.array_equal(grid[1, 1, 2], vals[1, 5])
        assert np.all(grid[:, 2] == 0)
        with pytest.raises(ConfigurationError):
            zc_grid(vals, 4)

    def test_zc_shape_mismatch(self):
        net = FusionNet(NetConfig(**SMALL), seed=0)
        with pytest.raises(ConfigurationError):
            net(np.zeros((1, 16, 16, 1)), np.zeros((1, 5, 16)))


def _swapped_mmfi(m: Mmfi, rng) -> Mmfi:
    """Parameters for mmfi(B, A) that mirror ``m`` on mmfi(A, B)."""
    C = m.C
    w = Mmfi(C, rng)
    for mine, theirs in (("ch_tfi", "ch_zc"), ("sp_tfi", "sp_zc"), ("ch_zc", "ch_tfi"), ("sp_zc", "sp_tfi")):
        getattr(w, mine).weight.data = getattr(m, theirs).weight.data.copy()
        getattr(w, mine).bias.data = getattr(m, theirs).bias.data.copy()
    # cross gates see shuffled [d1 d2 d3 d4]; swapping modalities rolls the concat by half
    for attr, n_in, groups in (("ch_cross", 4 * C, C), ("sp_cross", 4, 1)):
        dest = shuffle_permutation(n_in, groups)
        src = np.argsort(dest)
        roll = np.roll(np.arange(n_in), n_in // 2)
        where = dest[roll[src]]
        src_conv, dst_conv = getattr(m, attr), getattr(w, attr)
        dst_conv.c1.weight.data = src_conv.c1.weight.data[:, :, where, :].copy()
        for name in ("c1.bias", "c2.weight", "c2.bias"):
            a, b = name.split(".")
            setattr(getattr(dst_conv, a), b, getattr(getattr(src_conv, a), b))
    return w


class TestMmfi:
    @pytest.mark.parametrize("seed", range(5))
    def test_modality_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        m = parity._randomize(Mmfi(8, rng), rng)
        w = _swapped_mmfi(m, rng)
        a, b = rng.standard_normal((2, 4, 4, 8)), rng.standard_normal((2, 4, 4, 8))
        fc_a, fc_b, fs_a, fs_b = m(t(a), t(b))
        gc_b, gc_a, gs_b, gs_a = w(t(b), t(a))
        for x, y in ((fc_a, gc_a), (fc_b, gc_b), (fs_a, gs_a), (fs_b, gs_b)):
            assert np.abs(x.data - y.data).max() < 1e-9

    def test_tied_gates_are_self_symmetric(self):
        rng = np.random.default_rng(3)
        m = Mmfi(8, rng)
        m.ch_zc.weight.data, m.ch_zc.bias.data = m.ch_tfi.weight.data, m.ch_tfi.bias.data
        m.sp_zc.weight.data, m.sp_zc.bias.data = m.sp_tfi.weight.data, m.sp_tfi.bias.data
        w = _swapped_mmfi(m, rng)
        # symmetrize the cross gates: average with their mirrored copy
        for attr in ("ch_cross", "sp_cross"):
            avg = 0.5 * (getattr(m, attr).c1.weight.data + getattr(w, attr).c1.weight.data)
            getattr(m, attr).c1.weight.data = avg
        a, b = rng.standard_normal((1, 4, 4, 8)), rng.standard_normal((1, 4, 4, 8))
        fc_a, fc_b, fs_a, fs_b = m(t(a), t(b))
        gc_b, gc_a, gs_b, gs_a = m(t(b), t(a))
        assert np.abs(fc_a.data - gc_a.data).max() < 1e-9
        assert np.abs(fs_b.data - gs_b.data).max() < 1e-9

    def test_closed_gates_leave_residual(self):
        rng = np.random.default_rng(0)
        m = Mmfi(8, rng)
        for conv in (m.ch_tfi, m.ch_zc, m.ch_cross.c2, m.sp_tfi, m.sp_zc, m.sp_cross.c2):
            conv.weight.data = np.zeros_like(conv.weight.data)
            conv.bias.data = np.full_like(conv.bias.data, -800.0)
        a, b = rng.standard_normal((1, 4, 4, 8)), rng.standard_normal((1, 4, 4, 8))
        fc_a, fc_b, fs_a, fs_b = m(t(a), t(b))
        assert np.array_equal(fc_a.data, a) and np.array_equal(fs_b.data, b)

    def test_shape_mismatch(self):
        with pytest.raises(ParameterError):
            Mmfi(8, np.random.default_rng(0))(t(np.zeros((1, 4, 4, 8))), t(np.zeros((1, 2, 2, 8))))


class TestSmff:
    def test_gate_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(0)
        m = Smff(8, rng)
        g = m.gate(t(rng.standard_normal((2, 4, 4, 8))), t(rng.standard_normal((2, 4, 4, 8)))).data
        assert g.min() > 0.0 and g.max() < 1.0
        assert m(t(np.ones((2, 4, 4, 8))), t(np.ones((2, 4, 4, 8)))).shape == (2, 4, 4, 8)


class TestMmff:
    def test_attention_rows_normalized(self):
        for seed in range(5):
            _, cap = parity.mmff_gap(seed, return_attention=True)
            for aw in (cap["aw_tfi"], cap["aw_zc"]):
                assert np.abs(aw.sum(axis=-1) - 1.0).max() < 1e-6 and aw.min() >= 0

    def test_extreme_inputs_still_normalized(self):
        rng = np.random.default_rng(1)
        m = Mmff(8, rng)
        cap = {}
        m(t(1e3 * rng.standard_normal((1, 4, 4, 8))), t(1e3 * rng.standard_normal((1, 4, 4, 8))), capture=cap)
        assert np.abs(cap["aw_tfi"].sum(axis=-1) - 1.0).max() < 1e-6

    def test_identical_queries_and_keys_attend_uniformly(self):
        rng = np.random.default_rng(2)
        m = Mmff(8, rng)
        for conv in (m.q_tfi, m.q_zc, m.k_tfi, m.k_zc):
            conv.weight.data = np.zeros_like(conv.weight.data)
            conv.bias.data = np.full_like(conv.bias.data, 0.7)
        cap = {}
        m(t(rng.standard_normal((1, 4, 4, 8))), t(rng.standard_normal((1, 4, 4, 8))), capture=cap)
        assert np.allclose(cap["aw_tfi"], 1 / 16, atol=1e-12) and np.allclose(cap["aw_zc"], 1 / 16, atol=1e-12)
        assert cap["aw_tfi"].shape == (1, 16, 16)

    def test_output_width(self):
        out = Mmff(32, np.random.default_rng(0))(t(np.ones((1, 4, 4, 32))), t(np.ones((1, 4, 4, 32))))
        assert out.shape == (1, 4, 4, 8)

    def test_channels_divisible_by_four(self):
        with pytest.raises(ConfigurationError):
            NetConfig(channels=30)


class TestAfwStatistics:
    def test_identical_means(self):
        rng = np.random.default_rng(0)
        one = rng.random((4, 4, 8)) + 0.1
        st = stats_from_means(np.stack([one] * 3), alpha=0.3)
        assert np.abs(st.s_s - 1).max() < 1e-9 and np.abs(st.s_c - 1).max() < 1e-9
        assert np.abs(st.v_s).max() < 1e-9 and np.abs(st.v_c).max() < 1e-9
        assert np.abs(st.w_s - 0.3).max() < 1e-9 and np.abs(st.w_c - 0.3).max() < 1e-9

    def test_alpha_endpoints(self):
        means = np.random.default_rng(1).standard_normal((4, 4, 4, 8))
        hi, lo = stats_from_means(means, alpha=1.0), stats_from_means(means, alpha=0.0)
        assert np.abs(hi.w_s - hi.s_s).max() < 1e-9 and np.abs(hi.w_c - hi.s_c).max() < 1e-9
        assert np.abs(lo.w_s + lo.v_s).max() < 1e-9 and np.abs(lo.w_c + lo.v_c).max() < 1e-9

    def test_hand_built_two_class_case(self):
        means = np.zeros((2, 2, 2, 1))
        means[0, :, :, 0] = [[1, 2], [3, 4]]
        means[1, :, :, 0] = [[1, 0], [0, 1]]
        st = stats_from_means(means)
        # neighbourhood of (0,0), edge replicated: rows (0,0,1) x cols (0,0,1)
        assert abs(st.s_s[0, 0] - 8 / math.sqrt(46 * 5)) < 1e-9
        assert np.abs(st.v_s - [[0.0, 1.0], [2.25, 2.25]]).max() < 1e-9
        s_s, v_s, s_c, v_c = ref.afw_scores(means)
        assert np.abs(st.s_s - s_s).max() < 1e-9 and np.abs(st.v_s - v_s).max() < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_scores_match_pairwise_oracle(self, seed):
        means = np.random.default_rng(seed).standard_normal((5, 3, 4, 6))
        st = stats_from_means(means)
        for mine, theirs in zip((st.s_s, st.v_s, st.s_c, st.v_c), ref.afw_scores(means)):
            assert np.abs(mine - theirs).max() < 1e-9
        assert st.s_s.min() >= -1 - 1e-12 and st.s_s.max() <= 1 + 1e-12
        assert st.v_s.min() >= 0 and st.v_c.min() >= 0

    def test_from_samples(self):
        rng = np.random.default_rng(4)
        feats = [rng.standard_normal((n, 2, 2, 3)) for n in (3, 1, 5)]
        st = afw_stats(feats)
        assert st.class_count == 3
        assert np.allclose(st.class_means[2], feats[2].mean(axis=0))
        with pytest.raises(DiagnosticError):
            afw_stats(feats[:1])
        with pytest.raises(DiagnosticError):
            afw_stats([feats[0], np.zeros((0, 2, 2, 3))])


def _zero_stats(H=4, D=8):
    z = np.zeros
    return ClassStats(class_means=z((2, H, H, D)), m_s=z((2, H, H)), m_c=z((2, D)), s_s=z((H, H)),
                      v_s=z((H, H)), s_c=z(D), v_c=z(D))


class TestAfwWeights:
    def test_half_weights_when_scores_vanish(self):
        om_s, om_c = afw_weights(_zero_stats())
        assert np.all(om_s == 0.5) and np.all(om_c == 0.5)
        f = np.random.default_rng(0).standard_normal((4, 4, 8))
        assert np.allclose(afw_apply(f, _zero_stats()), 0.25 * f, atol=1e-15)

    def test_weight_decreases_with_score(self):
        st = _zero_stats()
        base = afw_weights(st)[0][1, 2]
        st.s_s[1, 2] = 0.4
        assert afw_weights(st)[0][1, 2] < base
        for w in np.linspace(-3, 3, 13):
            st.s_s[0, 0] = w
            cur = afw_weights(st)[0][0, 0]
            if w > -3:
                assert cur < prev
            prev = cur

    def test_apply_matches_broadcast_oracle(self):
        rng = np.random.default_rng(5)
        st = stats_from_means(rng.standard_normal((3, 4, 4, 8)), alpha=0.7, mapping=(1.3, -0.2, 0.8, 0.1))
        f = rng.standard_normal((4, 4, 8))
        out = afw_apply(f, st)
        om_s, om_c = afw_weights(st)
        for h in range(4):
            for w in range(4):
                for d in range(8):
                    assert abs(out[h, w, d] - f[h, w, d] * om_s[h, w] * om_c[d]) < 1e-12
        assert 0 < om_s.min() and om_s.max() < 1 and 0 < om_c.min() and om_c.max() < 1

    def test_missing_stats(self):
        with pytest.raises(DiagnosticError):
            afw_apply(np.ones((4, 4, 8)), None)


class TestFusionNet:
    def test_unit_weights_equal_no_afw_path(self):
        rng = np.random.default_rng(0)
        # batch statistics keep activations at unit scale on a fresh model
        net = FusionNet(NetConfig(**SMALL), seed=3).train()
        net.afw.set_means(rng.standard_normal((6, 2, 2, 2)))
        tfi, zc = rng.random((3, 16, 16, 1)), rng.random((3, 6, 16))
        unit, off = net(tfi, zc, afw="unit").data, net(tfi, zc, afw="off").data
        assert np.array_equal(unit, off)
        assert not np.array_equal(net(tfi, zc, afw="on").data, off)

    def test_full_network_gradient_at_desk_width(self):
        rng = np.random.default_rng(0)
        with T.precision("test"):
            fn, inputs = full_network(rng, channels=32, spatial=4, tfi_hw=32, depth=4, zc_cols=64)
            assert T.grad_check(fn, inputs, max_coords=2, rng=rng) < TOLERANCE

    @pytest.mark.parametrize("variant", ABLATIONS)
    def test_every_variant_runs(self, variant):
        net = FusionNet(NetConfig(variant=variant, **SMALL), seed=0)
        rng = np.random.default_rng(1)
        p = net.predict_proba(tfi=rng.random((3, 16, 16, 1)), zc=rng.random((3, 6, 16)),
                              iq=rng.standard_normal((3, 16, 16, 2)))
        assert p.shape == (3, 6)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-6

    def test_unknown_variant(self):
        with pytest.raises(ParameterError):
            NetConfig(variant="fusion_everything")

    def test_same_seed_same_init(self):
        a = FusionNet(NetConfig(**SMALL), seed=5).state_dict()
        b = FusionNet(NetConfig(**SMALL), seed=5).state_dict()
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


class TestDecision:
    def test_classify_sums_to_one(self):
        from dronefuse.nn import Linear
        head = Linear(8, 5, rng=np.random.default_rng(0))
        p = classify(np.random.default_rng(1).standard_normal((4, 2, 2, 8)), head)
        assert np.abs(p.sum(axis=1) - 1).max() < 1e-6

    def test_threshold_endpoints(self):
        probs = np.array([[0.5, 0.3, 0.2], [0.98, 0.01, 0.01]])
        assert np.array_equal(ood_decide(probs, OodPolicy(0.0)), [0, 0])
        assert np.all(ood_decide(probs, OodPolicy(1.0)) == OOD_LABEL)
        assert np.array_equal(ood_decide(probs, OodPolicy(0.6)), [OOD_LABEL, 0])

    def test_calibration_quantile(self):
        msp = np.linspace(0.01, 1.0, 100)
        pol = calibrate_policy(msp, 0.05)
        accepted = np.mean(msp >= pol.tau)
        assert 0.95 <= accepted <= 0.97
        with pytest.raises(ParameterError):
            calibrate_policy([], 0.05)
        with pytest.raises(ParameterError):
            OodPolicy(1.5)
