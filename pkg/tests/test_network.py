import numpy as np
import pytest

from helpers import finite_diff
from weakreg import NetworkConfig, RegistrationNet, init_parameters, load_checkpoint, save_checkpoint
from weakreg.layers import xavier_uniform


def tiny_inputs(rng, n=1, dims=(16, 16, 16), dtype=np.float64):
    moving = rng.normal(size=(n,) + dims).astype(dtype)
    fixed = rng.normal(size=(n,) + dims).astype(dtype)
    return moving, fixed


class TestConfig:
    def test_channel_progression(self):
        cfg = NetworkConfig(n0=4)
        assert [cfg.channels(k) for k in range(5)] == [4, 8, 16, 32, 64]

    def test_rejects_bad_levels(self):
        with pytest.raises(ValueError):
            NetworkConfig(summand_levels=(5,))
        with pytest.raises(ValueError):
            NetworkConfig(summand_levels=())

    def test_rejects_unknown_head(self):
        with pytest.raises(ValueError):
            NetworkConfig(head="rigid")


class TestInit:
    def test_summand_heads_are_all_zero(self):
        store = init_parameters(NetworkConfig(n0=2), seed=11)
        head_names = [n for n in store.params if n.startswith("head")]
        assert len(head_names) == 10  # 5 levels x (w, b)
        for name in head_names:
            assert np.all(store.params[name].value == 0.0)

    def test_xavier_bounds_per_tensor(self):
        store = init_parameters(NetworkConfig(n0=2), seed=3)
        for name, p in store.params.items():
            if name.startswith("head") or not name.endswith(".w"):
                continue
            if "deconv" in name:
                c_in, c_out = p.value.shape[0], p.value.shape[1]
                k3 = 8
            else:
                c_out, c_in = p.value.shape[0], p.value.shape[1]
                k3 = int(np.prod(p.value.shape[2:]))
            bound = np.sqrt(6.0 / (c_in * k3 + c_out * k3))
            assert np.abs(p.value).max() <= bound + 1e-12, name
            assert np.abs(p.value).max() > 0.2 * bound, name

    def test_same_seed_is_bitwise_identical(self):
        a = init_parameters(NetworkConfig(n0=2), seed=5)
        b = init_parameters(NetworkConfig(n0=2), seed=5)
        for name in a.params:
            assert a.params[name].value.tobytes() == b.params[name].value.tobytes()

    def test_different_seed_differs(self):
        a = init_parameters(NetworkConfig(n0=2), seed=5)
        b = init_parameters(NetworkConfig(n0=2), seed=6)
        assert any(
            a.params[n].value.tobytes() != b.params[n].value.tobytes()
            for n in a.params
            if n.endswith(".w") and not n.startswith("head")
        )


class TestForward:
    def test_fresh_network_emits_bitwise_zero_field(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2), seed=1, dtype=np.float32)
        moving, fixed = tiny_inputs(rng, dims=(16, 16, 16), dtype=np.float32)
        summands, ddf = net.forward_ddf(moving, fixed, training=True)
        assert ddf.shape == (1, 3, 16, 16, 16)
        assert ddf.tobytes() == np.zeros_like(ddf).tobytes()
        for arr in summands.values():
            assert np.all(arr == 0.0)

    def test_level_shapes_and_channels(self, rng):
        cfg = NetworkConfig(n0=2)
        net = RegistrationNet(cfg, seed=1, dtype=np.float32)
        moving, fixed = tiny_inputs(rng, dims=(32, 32, 32), dtype=np.float32)
        summands, ddf = net.forward_ddf(moving, fixed, training=True)
        for lvl, arr in summands.items():
            d = 32 // (2**lvl)
            assert arr.shape == (1, 3, d, d, d)
        assert ddf.shape == (1, 3, 32, 32, 32)
        # head conv input channels double per level
        for lvl in range(5):
            assert net.heads[lvl].conv.c_in == cfg.channels(lvl)

    @pytest.mark.parametrize("levels", [(0,), (1, 2, 3, 4), (2,)])
    def test_summand_subsets_preserve_output_dims(self, rng, levels):
        net = RegistrationNet(NetworkConfig(n0=2, summand_levels=levels), seed=2, dtype=np.float32)
        moving, fixed = tiny_inputs(rng, dtype=np.float32)
        summands, ddf = net.forward_ddf(moving, fixed, training=True)
        assert set(summands) == set(levels)
        assert ddf.shape == (1, 3, 16, 16, 16)

    def test_indivisible_dims_rejected(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2), seed=1, dtype=np.float32)
        moving = np.zeros((1, 12, 16, 16), dtype=np.float32)
        with pytest.raises(ValueError, match="divisible by 16"):
            net.forward_ddf(moving, moving)

    def test_forward_is_deterministic(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2), seed=1, dtype=np.float32)
        for p in net.store.params.values():
            if p.name.startswith("head"):
                p.value[...] = 0.01  # make the output nonzero
        moving, fixed = tiny_inputs(rng, dtype=np.float32)
        _, a = net.forward_ddf(moving, fixed, training=False)
        _, b = net.forward_ddf(moving, fixed, training=False)
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_end_to_end_gradients_match_finite_differences(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2), seed=7, dtype=np.float64)
        moving, fixed = tiny_inputs(rng)
        g = rng.normal(size=(1, 3, 16, 16, 16))

        def run():
            _, ddf = net.forward_ddf(moving, fixed, training=True)
            return float((ddf * g).sum())

        run()
        net.store.zero_grads()
        net.backward_ddf(g)

        names = [n for n in net.store.params if n.endswith(".w") or n.endswith(".gamma")]
        check = rng.choice(names, size=min(10, len(names)), replace=False)
        for name in check:
            p = net.store.params[name]
            flat_idx = int(rng.integers(p.value.size))

            def f(v):
                p.value.reshape(-1)[flat_idx] = v
                return run()

            orig = p.value.reshape(-1)[flat_idx]
            eps = 1e-5
            fd = (f(orig + eps) - f(orig - eps)) / (2 * eps)
            p.value.reshape(-1)[flat_idx] = orig
            an = p.grad.reshape(-1)[flat_idx]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (name, fd, an)

    def test_head_gradients_nonzero_for_mismatched_labels(self, rng):
        # zero-initialized heads must still receive gradient so training can move
        from weakreg.losses import MultiscaleConfig, multiscale_dice_with_grad
        from weakreg.spatial import trilinear_warp_vjp

        net = RegistrationNet(NetworkConfig(n0=2), seed=3, dtype=np.float64)
        dims = (16, 16, 16)
        moving, fixed = tiny_inputs(rng, dims=dims)
        grid = np.indices(dims).astype(np.float64)
        l_moving = (((grid[0] - 5) ** 2 + (grid[1] - 8) ** 2 + (grid[2] - 8) ** 2) < 9).astype(float)
        l_fixed = (((grid[0] - 10) ** 2 + (grid[1] - 8) ** 2 + (grid[2] - 8) ** 2) < 9).astype(float)
        spacing = (0.8, 0.8, 0.8)

        _, ddf = net.forward_ddf(moving, fixed, training=True)
        warped, vjp = trilinear_warp_vjp(l_moving, ddf[0], spacing, spacing)
        cfg = MultiscaleConfig.default(spacing)
        _, _, d_warped, _ = multiscale_dice_with_grad(l_fixed, warped, cfg)
        _, d_ddf = vjp(-d_warped)  # loss is -J
        net.store.zero_grads()
        net.backward_ddf(d_ddf[None])
        for lvl in range(5):
            assert np.any(net.store.params[f"head{lvl}.w"].grad != 0.0), lvl


class TestAffineHead:
    def test_fresh_head_outputs_identity(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2, head="affine"), seed=4, dtype=np.float32)
        moving, fixed = tiny_inputs(rng, n=2, dtype=np.float32)
        params = net.forward_affine(moving, fixed, training=True)
        assert params.shape == (2, 12)
        expected = np.array([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0], dtype=np.float32)
        assert np.array_equal(params, np.stack([expected, expected]))

    def test_pooled_representation_is_permutation_invariant(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2, head="affine"), seed=4, dtype=np.float64)
        feats = rng.normal(size=(1, 32, 2, 2, 2))
        out1 = net.fc.forward(net.gap.forward(feats))
        perm = rng.permutation(8)
        shuffled = feats.reshape(1, 32, 8)[:, :, perm].reshape(feats.shape)
        out2 = net.fc.forward(net.gap.forward(shuffled))
        assert np.allclose(out1, out2, atol=1e-12)

    def test_affine_backward_reaches_head_then_trunk(self, rng):
        net = RegistrationNet(NetworkConfig(n0=2, head="affine"), seed=4, dtype=np.float64)
        moving, fixed = tiny_inputs(rng)
        net.forward_affine(moving, fixed, training=True)
        net.store.zero_grads()
        net.backward_affine(np.ones((1, 12)))
        # with the zero-initialized head only its own parameters see gradient
        assert np.any(net.store.params["affine.fc.w"].grad != 0.0)
        assert np.all(net.store.params["stem.conv.w"].grad == 0.0)
        # once the head weights move, gradient reaches the trunk
        net.store.params["affine.fc.w"].value[...] = 0.01
        net.forward_affine(moving, fixed, training=True)
        net.store.zero_grads()
        net.backward_affine(np.ones((1, 12)))
        assert np.any(net.store.params["stem.conv.w"].grad != 0.0)


class TestCheckpoint:
    def test_roundtrip_is_bitwise(self, tmp_path, rng):
        net = RegistrationNet(NetworkConfig(n0=2, summand_levels=(0, 2)), seed=9)
        # make the state nontrivial
        for p in net.store.params.values():
            p.m[...] = rng.normal(size=p.m.shape).astype(np.float32)
            p.v[...] = rng.uniform(0, 1, p.v.shape).astype(np.float32)
        for arr in net.store.state.values():
            arr[...] = rng.normal(size=arr.shape).astype(np.float32)
        save_checkpoint(tmp_path / "ckpt", net, iteration=17, extra={"adam_t": 17})
        back, manifest = load_checkpoint(tmp_path / "ckpt")
        assert manifest["iteration"] == 17
        assert manifest["extra"]["adam_t"] == 17
        assert back.cfg == net.cfg
        for name in net.store.params:
            for field in ("value", "m", "v"):
                assert getattr(back.store.params[name], field).tobytes() == getattr(
                    net.store.params[name], field
                ).tobytes(), (name, field)
        for name in net.store.state:
            assert back.store.state[name].tobytes() == net.store.state[name].tobytes()

    def test_config_roundtrips_through_manifest(self, tmp_path):
        cfg = NetworkConfig(n0=3, summand_levels=(1, 3), head="ddf", bn_momentum=0.8)
        net = RegistrationNet(cfg, seed=2)
        save_checkpoint(tmp_path / "c", net)
        back, _ = load_checkpoint(tmp_path / "c")
        assert back.cfg == cfg

    def test_bad_format_rejected(self, tmp_path):
        net = RegistrationNet(NetworkConfig(n0=2), seed=1)
        path = save_checkpoint(tmp_path / "c", net)
        text = path.read_text().replace("weakreg-checkpoint-v1", "other")
        path.write_text(text)
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(tmp_path / "c")


def test_xavier_uniform_bound():
    rng = np.random.default_rng(0)
    w = xavier_uniform(rng, (64, 64), 128, 128)
    bound = np.sqrt(6.0 / 256)
    assert np.abs(w).max() <= bound
