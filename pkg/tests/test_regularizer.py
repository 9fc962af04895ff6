"""Side classifier and adversarial objective tests.

Oracles here are per-fiber loops: a 1x1-conv side classifier is just an
affine map applied to every (batch, row, col) fiber independently, so the
reference implementations walk the location grid in Python.
"""

from collections import OrderedDict

import numpy as np
import pytest

from patchreg import network, ops
from patchreg.exceptions import ConfigError, ShapeError
from patchreg.regularizer import (
    MultiLevelSpec,
    ParResult,
    SideClassifierSpec,
    init_multi_side_params,
    init_side_params,
    multi_level_objective,
    par_objective,
    patch_loss,
    patch_loss_with_grad,
    side_accuracy,
    side_logits,
    side_logits_vjp,
    side_param_shapes,
)

from conftest import max_rel_err


def softmax_ce_scalar(logits, label):
    # independent scalar reference: shift, exponentiate, normalize
    z = logits - logits.max()
    p = np.exp(z) / np.exp(z).sum()
    return -np.log(p[label])


def linear_fiber_oracle(tap, w, b):
    # w: (k, c, 1, 1) -> per-fiber affine
    bsz, c, m, n = tap.shape
    k = w.shape[0]
    out = np.zeros((bsz, k, m, n))
    for s in range(bsz):
        for i in range(m):
            for j in range(n):
                out[s, :, i, j] = w[:, :, 0, 0] @ tap[s, :, i, j] + b
    return out


def mlp3_fiber_oracle(tap, phi):
    bsz, c, m, n = tap.shape
    w0, b0 = phi["stage0.weight"][:, :, 0, 0], phi["stage0.bias"]
    w1, b1 = phi["stage1.weight"][:, :, 0, 0], phi["stage1.bias"]
    w2, b2 = phi["stage2.weight"][:, :, 0, 0], phi["stage2.bias"]
    k = w2.shape[0]
    out = np.zeros((bsz, k, m, n))
    for s in range(bsz):
        for i in range(m):
            for j in range(n):
                h = np.maximum(w0 @ tap[s, :, i, j] + b0, 0.0)
                h = np.maximum(w1 @ h + b1, 0.0)
                out[s, :, i, j] = w2 @ h + b2
    return out


def conv_pad_oracle(tap, w, b, pad):
    # padded same-size convolution by explicit loops
    bsz, c, m, n = tap.shape
    k, _, kh, kw = w.shape
    xp = np.pad(tap, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((bsz, k, m, n))
    for s in range(bsz):
        for o in range(k):
            for i in range(m):
                for j in range(n):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[s, ci, i + u, j + v]
                    out[s, o, i, j] = acc
    return out


def patch_loss_oracle(side, labels):
    bsz, k, m, n = side.shape
    total = 0.0
    for s in range(bsz):
        for i in range(m):
            for j in range(n):
                total += softmax_ce_scalar(side[s, :, i, j], labels[s])
    return total / (bsz * m * n)


def rand_tap(rng, bsz=3, c=4, m=5, n=6):
    return rng.standard_normal((bsz, c, m, n))


class TestSpecValidation:
    def test_kind_rejected(self):
        with pytest.raises(ConfigError, match="kind"):
            SideClassifierSpec(kind="quadratic")

    def test_even_conv_kernel_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            SideClassifierSpec(kind="conv4")

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError, match="lambda"):
            SideClassifierSpec(lam=-0.5)

    def test_attach_level_zero_rejected(self):
        with pytest.raises(ConfigError, match="attach_level"):
            SideClassifierSpec(attach_level=0)

    def test_conv_kernel_property(self):
        assert SideClassifierSpec(kind="conv3").conv_kernel == 3
        assert SideClassifierSpec(kind="linear").conv_kernel == 1

    def test_multi_level_weights(self):
        assert MultiLevelSpec(3, 0.5).weights() == (1.0, 0.5, 0.25)
        assert MultiLevelSpec(1, 0.9).weights() == (1.0,)

    def test_multi_level_bad_decay(self):
        with pytest.raises(ConfigError, match="decay"):
            MultiLevelSpec(2, -1.0)


class TestInit:
    def test_shapes_match_declaration(self):
        spec = SideClassifierSpec(kind="mlp3", mlp_hidden=7, num_classes=5)
        phi = init_side_params(spec, 4, seed=3)
        assert {k: v.shape for k, v in phi.items()} == dict(side_param_shapes(spec, 4))

    def test_deterministic(self):
        spec = SideClassifierSpec(kind="conv3")
        a = init_side_params(spec, 3, seed=11)
        b = init_side_params(spec, 3, seed=11)
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_biases_zero(self):
        phi = init_side_params(SideClassifierSpec(kind="mlp3"), 4, seed=0)
        for k, v in phi.items():
            if k.endswith("bias"):
                assert np.all(v == 0.0)


class TestSideLogits:
    def test_linear_matches_fiber_oracle(self, rng):
        spec = SideClassifierSpec(kind="linear", num_classes=6)
        for t in range(20):
            r = np.random.default_rng(1000 + t)
            tap = rand_tap(r)
            phi = init_side_params(spec, 4, seed=2000 + t)
            phi["stage0.bias"] = r.standard_normal(6)
            got = side_logits(tap, spec, phi)
            want = linear_fiber_oracle(tap, phi["stage0.weight"], phi["stage0.bias"])
            assert max_rel_err(got, want) <= 1e-12

    def test_mlp3_matches_fiber_oracle(self):
        spec = SideClassifierSpec(kind="mlp3", mlp_hidden=5, num_classes=4)
        for t in range(5):
            r = np.random.default_rng(3000 + t)
            tap = rand_tap(r, bsz=2, c=3, m=4, n=4)
            phi = init_side_params(spec, 3, seed=4000 + t)
            for k in phi:
                if k.endswith("bias"):
                    phi[k] = r.standard_normal(phi[k].shape)
            got = side_logits(tap, spec, phi)
            want = mlp3_fiber_oracle(tap, phi)
            assert max_rel_err(got, want) <= 1e-12

    def test_conv3_matches_padded_loop_oracle(self):
        spec = SideClassifierSpec(kind="conv3", num_classes=4)
        for t in range(3):
            r = np.random.default_rng(5000 + t)
            tap = rand_tap(r, bsz=2, c=3, m=5, n=5)
            phi = init_side_params(spec, 3, seed=6000 + t)
            got = side_logits(tap, spec, phi)
            want = conv_pad_oracle(tap, phi["stage0.weight"], phi["stage0.bias"], pad=1)
            assert got.shape == tap.shape[:1] + (4,) + tap.shape[2:]
            assert max_rel_err(got, want) <= 1e-12

    def test_location_grid_preserved(self, rng):
        tap = rand_tap(rng, m=7, n=3)
        for kind in ("linear", "conv3", "mlp3"):
            spec = SideClassifierSpec(kind=kind, num_classes=10, mlp_hidden=6)
            phi = init_side_params(spec, 4, seed=1)
            assert side_logits(tap, spec, phi).shape == (3, 10, 7, 3)

    def test_channel_mismatch(self, rng):
        spec = SideClassifierSpec(kind="linear")
        phi = init_side_params(spec, 5, seed=0)
        with pytest.raises(ShapeError, match="channel"):
            side_logits(rand_tap(rng, c=4), spec, phi)

    def test_vjp_matches_finite_differences(self, rng):
        # one combined check per kind over tap and every phi tensor
        for kind in ("linear", "conv3", "mlp3"):
            spec = SideClassifierSpec(kind=kind, num_classes=3, mlp_hidden=4)
            tap = rand_tap(rng, bsz=2, c=3, m=3, n=3)
            phi = init_side_params(spec, 3, seed=9)
            for k in phi:  # move off the relu kinks
                phi[k] = phi[k] + 0.05 * np.sign(phi[k]) + 0.05 * (phi[k] == 0)
            w = np.random.default_rng(7).standard_normal(
                side_logits(tap, spec, phi).shape)

            def scalar(tap=tap, phi=phi, spec=spec, w=w):
                return float((side_logits(tap, spec, phi) * w).sum())

            d_tap, d_phi = side_logits_vjp(tap, spec, phi, w)
            eps = 1e-6
            for arr, grad in [(tap, d_tap)] + [(phi[k], d_phi[k]) for k in phi]:
                flat, gflat = arr.reshape(-1), grad.reshape(-1)
                idx = np.random.default_rng(8).choice(flat.size, size=min(12, flat.size), replace=False)
                for c in idx:
                    orig = flat[c]
                    flat[c] = orig + eps
                    up = scalar()
                    flat[c] = orig - eps
                    down = scalar()
                    flat[c] = orig
                    fd = (up - down) / (2 * eps)
                    assert abs(fd - gflat[c]) <= 1e-4 * max(1.0, abs(fd)), kind


class TestPatchLoss:
    def test_zero_logits_log_k(self):
        side = np.zeros((3, 10, 4, 4))
        labels = np.array([0, 5, 9])
        assert abs(patch_loss(side, labels) - np.log(10.0)) <= 1e-12

    def test_matches_location_loop_oracle(self):
        for t in range(20):
            r = np.random.default_rng(100 + t)
            side = 3.0 * r.standard_normal((2, 5, 3, 4))
            labels = r.integers(0, 5, size=2)
            got = patch_loss(side, labels)
            want = patch_loss_oracle(side, labels)
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    def test_batch_permutation_invariant(self, rng):
        side = rng.standard_normal((6, 4, 2, 3))
        labels = rng.integers(0, 4, size=6)
        perm = rng.permutation(6)
        a = patch_loss(side, labels)
        b = patch_loss(side[perm], labels[perm])
        assert abs(a - b) <= 1e-12

    def test_grad_matches_finite_differences(self, rng):
        side = rng.standard_normal((2, 4, 3, 3))
        labels = np.array([1, 3])
        _, grad = patch_loss_with_grad(side, labels)
        eps = 1e-6
        flat = side.reshape(-1)
        gflat = grad.reshape(-1)
        for c in range(0, flat.size, 7):
            orig = flat[c]
            flat[c] = orig + eps
            up = patch_loss(side, labels)
            flat[c] = orig - eps
            down = patch_loss(side, labels)
            flat[c] = orig
            fd = (up - down) / (2 * eps)
            assert abs(fd - gflat[c]) <= 1e-6

    def test_bad_rank(self):
        with pytest.raises(ShapeError, match="4 axes"):
            patch_loss(np.zeros((2, 3)), np.array([0, 1]))

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError, match="labels"):
            patch_loss(np.zeros((2, 3, 2, 2)), np.array([0, 1, 2]))


class TestSideAccuracy:
    def test_matches_counting_oracle(self):
        spec = SideClassifierSpec(kind="linear", num_classes=5)
        for t in range(20):
            r = np.random.default_rng(700 + t)
            tap = rand_tap(r, bsz=3, c=4, m=4, n=5)
            phi = init_side_params(spec, 4, seed=800 + t)
            labels = r.integers(0, 5, size=3)
            logits = side_logits(tap, spec, phi)
            hits = 0
            for s in range(3):
                for i in range(4):
                    for j in range(5):
                        if int(np.argmax(logits[s, :, i, j])) == labels[s]:
                            hits += 1
            want = hits / (3 * 4 * 5)
            assert side_accuracy(tap, spec, phi, labels) == pytest.approx(want, abs=1e-15)

    def test_zero_phi_ties_break_to_class_zero(self, rng):
        # all-zero logits predict class 0 everywhere
        spec = SideClassifierSpec(kind="linear", num_classes=4)
        phi = OrderedDict(
            (k, np.zeros(s)) for k, s in side_param_shapes(spec, 3).items())
        tap = rand_tap(rng, bsz=5, c=3)
        labels = np.array([0, 0, 1, 2, 3])
        assert side_accuracy(tap, spec, phi, labels) == pytest.approx(2 / 5)


def small_setup(seed=0, kind="linear", lam=1.0, attach_level=1, bsz=3):
    graph = network.build_backbone("c3k3p1-c4k3p0-f12", 5, attach_level=attach_level)
    params = network.init_params(graph, seed)
    rng = np.random.default_rng(seed + 50)
    for k, v in params.items():  # off the kinks for exact decomposition checks
        if k.endswith("bias"):
            params.assign(k, v + rng.uniform(0.02, 0.1, size=v.shape))
    spec = SideClassifierSpec(kind=kind, num_classes=5, mlp_hidden=6,
                              lam=lam, attach_level=attach_level)
    c = graph.level_shape(attach_level)[0]
    phi = init_side_params(spec, c, seed=seed + 1)
    batch = rng.uniform(0.0, 1.0, size=(bsz, 1, 28, 28))
    labels = rng.integers(0, 5, size=bsz)
    return graph, params, spec, phi, batch, labels


def injection_only_grads(graph, params, batch, labels, level, d_tap):
    """Backbone gradient of the patch loss alone, by linearity of the
    reverse pass: grads(main + injection) - grads(main)."""
    _, g_main = network.backward(graph, params, batch, labels)
    _, g_both = network.backward(graph, params, batch, labels,
                                 tap_grads={level: d_tap})
    return g_main, OrderedDict((k, g_both[k] - g_main[k]) for k in g_main)


class TestParObjective:
    def test_side_loss_log_k_at_zero_phi(self):
        graph, params, spec, phi, batch, labels = small_setup()
        for k in phi:
            phi[k] = np.zeros_like(phi[k])
        res = par_objective(graph, params, phi, spec, batch, labels)
        assert abs(res.side_loss - np.log(5.0)) <= 1e-12

    def test_logits_match_plain_forward(self):
        graph, params, spec, phi, batch, labels = small_setup()
        res = par_objective(graph, params, phi, spec, batch, labels)
        logits, _ = network.forward(graph, params, batch)
        assert np.array_equal(res.logits, logits)

    @pytest.mark.parametrize("lam", [0.01, 1.0, 100.0])
    def test_delta_grad_decomposes(self, lam):
        # the adversarial gradient must equal main minus lam * patch pull
        graph, params, spec, phi, batch, labels = small_setup(kind="conv3", lam=lam)
        tap = network.forward(graph, params, batch)[1]
        side = side_logits(tap, spec, phi)
        _, d_side = patch_loss_with_grad(side, labels)
        d_tap, _ = side_logits_vjp(tap, spec, phi, d_side)
        g_main, g_patch = injection_only_grads(graph, params, batch, labels,
                                               spec.attach_level, d_tap)
        res = par_objective(graph, params, phi, spec, batch, labels)
        delta, theta = graph.partition()
        for k in delta:
            want = g_main[k] - lam * g_patch[k]
            assert np.max(np.abs(res.net_grads[k] - want)) <= 1e-9
        for k in theta:
            assert np.array_equal(res.net_grads[k], g_main[k])

    def test_phi_grads_scale_with_lambda(self):
        graph, params, spec1, phi, batch, labels = small_setup(lam=1.0)
        graph2, params2, spec7, phi2, batch2, labels2 = small_setup(lam=7.0)
        r1 = par_objective(graph, params, phi, spec1, batch, labels)
        r7 = par_objective(graph, params, phi, spec7, batch, labels)
        for k in r1.side_grads:
            assert max_rel_err(r7.side_grads[k], 7.0 * r1.side_grads[k]) <= 1e-12

    def test_phi_grads_match_side_only_pass(self):
        graph, params, spec, phi, batch, labels = small_setup(kind="mlp3", lam=3.0)
        tap = network.forward(graph, params, batch)[1]
        side = side_logits(tap, spec, phi)
        _, d_side = patch_loss_with_grad(side, labels)
        _, d_phi = side_logits_vjp(tap, spec, phi, d_side)
        res = par_objective(graph, params, phi, spec, batch, labels)
        for k in phi:
            assert np.max(np.abs(res.side_grads[k] - 3.0 * d_phi[k])) <= 1e-12

    def test_attach_level_two(self):
        graph, params, spec, phi, batch, labels = small_setup(attach_level=2)
        res = par_objective(graph, params, phi, spec, batch, labels)
        assert np.isfinite(res.main_loss) and np.isfinite(res.side_loss)

    def test_missing_level_rejected(self):
        graph, params, spec, phi, batch, labels = small_setup()
        bad = SideClassifierSpec(kind="linear", num_classes=5, attach_level=9)
        with pytest.raises(ConfigError, match="level"):
            par_objective(graph, params, phi, bad, batch, labels)


class TestMultiLevel:
    def setup_multi(self, num_levels=2, decay=0.5, lam=2.0):
        graph, params, _, _, batch, labels = small_setup()
        spec = SideClassifierSpec(kind="linear", num_classes=5, lam=lam,
                                  multi_level=MultiLevelSpec(num_levels, decay))
        phis = init_multi_side_params(graph, spec, seed=5)
        return graph, params, spec, phis, batch, labels

    def test_total_is_weighted_sum(self):
        graph, params, spec, phis, batch, labels = self.setup_multi()
        res = multi_level_objective(graph, params, phis, spec, batch, labels)
        want = res.side_losses[0] + 0.5 * res.side_losses[1]
        assert abs(res.total_side_loss - want) <= 1e-12

    def test_single_level_matches_par_objective(self):
        graph, params, spec, phis, batch, labels = self.setup_multi(num_levels=1, lam=1.5)
        single = SideClassifierSpec(kind="linear", num_classes=5, lam=1.5)
        rm = multi_level_objective(graph, params, phis, spec, batch, labels)
        rp = par_objective(graph, params, phis[0], single, batch, labels)
        assert rm.side_losses[0] == pytest.approx(rp.side_loss, abs=1e-15)
        for k in rp.net_grads:
            assert np.max(np.abs(rm.net_grads[k] - rp.net_grads[k])) <= 1e-12
        for k in phis[0]:
            assert np.array_equal(rm.side_grads[0][k], rp.side_grads[k])

    def test_net_grads_decompose_per_level(self):
        lam = 2.0
        graph, params, spec, phis, batch, labels = self.setup_multi(lam=lam)
        _, taps = network.forward_taps(graph, params, batch)
        _, g_main = network.backward(graph, params, batch, labels)
        pulls = {}
        for lvl in (1, 2):
            side = side_logits(taps[lvl], spec, phis[lvl - 1])
            _, d_side = patch_loss_with_grad(side, labels)
            d_tap, _ = side_logits_vjp(taps[lvl], spec, phis[lvl - 1], d_side)
            _, pulls[lvl] = injection_only_grads(graph, params, batch, labels, lvl, d_tap)
        res = multi_level_objective(graph, params, phis, spec, batch, labels)
        for k in g_main:
            want = g_main[k] - lam * 1.0 * pulls[1][k] - lam * 0.5 * pulls[2][k]
            assert np.max(np.abs(res.net_grads[k] - want)) <= 1e-9

    def test_requires_multi_spec(self):
        graph, params, _, phis, batch, labels = self.setup_multi()
        plain = SideClassifierSpec(kind="linear", num_classes=5)
        with pytest.raises(ConfigError, match="multi_level"):
            multi_level_objective(graph, params, phis, plain, batch, labels)

    def test_too_many_levels(self):
        graph, params, _, _, batch, labels = self.setup_multi()
        spec = SideClassifierSpec(kind="linear", num_classes=5,
                                  multi_level=MultiLevelSpec(3, 0.5))
        with pytest.raises(ConfigError, match="levels"):
            init_multi_side_params(graph, spec, seed=0)

    def test_phi_count_mismatch(self):
        graph, params, spec, phis, batch, labels = self.setup_multi()
        with pytest.raises(ConfigError, match="phi"):
            multi_level_objective(graph, params, phis[:1], spec, batch, labels)
