import numpy as np
import pytest
from gradcheck import autodiff_grad, finite_difference, max_relative_error

from diffproto.data import FormatError
from diffproto.denoiser import (
    DenoiserConfig,
    DenoiserModel,
    encode_time,
    init_identity,
    load_arrays,
    load_model,
    paper_scale_config,
    save_arrays,
    save_model,
)
from diffproto.numerics import RngStream, ShapeError, Tape, Tensor, backward, tmean, mul, sub


def tiny_config(**overrides):
    base = dict(
        n_layers=2, d_model=16, n_heads=2, mlp_hidden=16,
        proto_dim=4, max_ways=3, timesteps=10, time_freqs=4,
    )
    base.update(overrides)
    return DenoiserConfig(**base)


def desk_config(**overrides):
    base = dict(proto_dim=8, max_ways=5, timesteps=100)
    base.update(overrides)
    return DenoiserConfig(**base)


class TestEncodeTime:
    def test_zero_phase(self):
        enc = encode_time(0, 100, 8)
        np.testing.assert_array_equal(enc[:8], 0.0)
        np.testing.assert_array_equal(enc[8:], 1.0)

    def test_endpoint(self):
        enc = encode_time(100, 100, 8)
        assert abs(enc[0]) < 1e-12  # sin(pi)
        assert enc[8] == -1.0  # cos(pi)

    def test_injective_over_all_timesteps(self):
        encodings = np.array([encode_time(t, 100, 8) for t in range(101)])
        distinct = {tuple(row) for row in encodings}
        assert len(distinct) == 101

    def test_range_check(self):
        with pytest.raises(ValueError):
            encode_time(101, 100, 8)


class TestBuildTokens:
    def setup_method(self):
        self.rng = RngStream(41)
        self.model = DenoiserModel(desk_config(), self.rng)
        self.state = self.rng.standard_normal((5, 8)).astype(np.float32)
        self.vanilla = self.rng.standard_normal((5, 8)).astype(np.float32)

    def test_sequence_length(self):
        tokens = self.model.build_tokens(self.state, self.vanilla, t=7)
        assert tokens.shape == (11, self.model.config.d_model)
        short = self.model.build_tokens(self.state[:2], self.vanilla[:2], t=7)
        assert short.shape == (5, self.model.config.d_model)

    def test_cond_none_ignores_vanilla(self):
        model = DenoiserModel(desk_config(cond_mode="none"), RngStream(41))
        a = model.build_tokens(self.state, self.vanilla, t=3).data
        b = model.build_tokens(self.state, self.vanilla * 5.0 + 1.0, t=3).data
        np.testing.assert_array_equal(a[5:10], b[5:10])

    def test_class_swap_symmetry_before_positions(self):
        slots = np.concatenate([np.arange(5), 5 + np.arange(5), [10]])
        pos = self.model.params["pos_embed"].data[slots]
        base = self.model.build_tokens(self.state, self.vanilla, t=4).data - pos
        swap = np.arange(5)
        swap[[1, 3]] = [3, 1]
        swapped = self.model.build_tokens(self.state[swap], self.vanilla[swap], t=4).data - pos
        np.testing.assert_allclose(swapped[:5], base[:5][swap], atol=1e-6)
        np.testing.assert_allclose(swapped[5:10], base[5:10][swap], atol=1e-6)

    def test_too_many_ways_rejected(self):
        wide = self.rng.standard_normal((6, 8)).astype(np.float32)
        with pytest.raises(ShapeError, match="ways"):
            self.model.build_tokens(wide, wide, t=1)


class TestDenoise:
    def test_zero_init_decoder_gives_zero(self):
        model = DenoiserModel(desk_config(), RngStream(42))
        model.init_identity()
        state = RngStream(43).standard_normal((5, 8)).astype(np.float32)
        out = model.predict(state, state, t=50)
        assert out.shape == (5, 8)
        assert not out.any()

    @pytest.mark.parametrize("n,d", [(2, 8), (5, 8), (2, 32), (5, 32)])
    def test_output_shape_sweep(self, n, d):
        model = DenoiserModel(desk_config(proto_dim=d), RngStream(44))
        rng = RngStream(45)
        state = rng.standard_normal((n, d)).astype(np.float32)
        out = model.predict(state, state, t=3)
        assert out.shape == (n, d)

    def test_deterministic_forward(self):
        model = DenoiserModel(desk_config(), RngStream(46))
        state = RngStream(47).standard_normal((5, 8)).astype(np.float32)
        a = model.predict(state, state, t=9)
        b = model.predict(state, state, t=9)
        assert a.tobytes() == b.tobytes()

    def test_mse_gradient_matches_fd_on_tiny_config(self):
        model = DenoiserModel(tiny_config(), RngStream(48), dtype=np.float64)
        rng = RngStream(49)
        state = rng.standard_normal((3, 4))
        vanilla = rng.standard_normal((3, 4))
        target = rng.standard_normal((3, 4))

        def loss_tensor():
            pred = model.forward(state, vanilla, t=5)
            diff = sub(pred, Tensor(target))
            return tmean(mul(diff, diff))

        params = list(model.params.values())
        grads = autodiff_grad(loss_tensor, *params)
        for (name, p), g in zip(model.params.items(), grads):
            fd = finite_difference(lambda: loss_tensor().item(), p.data)
            err = max_relative_error(g, fd, floor=1e-4)
            assert err <= 1e-4, f"{name}: rel err {err:.3e}"

    def test_paper_scale_forward_and_backward(self):
        model = DenoiserModel(paper_scale_config(proto_dim=8, max_ways=5), RngStream(50))
        rng = RngStream(51)
        state = rng.standard_normal((5, 8)).astype(np.float32)
        with Tape() as tape:
            pred = model.forward(state, state, t=60)
            diff = sub(pred, Tensor(state))
            loss = tmean(mul(diff, diff))
        assert pred.shape == (5, 8)
        grads = backward(tape, loss)
        assert all(np.isfinite(g).all() for g in grads.values())
        assert np.abs(grads[model.params["decoder/w"]]).max() > 0


class TestIdentityInit:
    def test_init_identity_zeroes_decoder(self):
        model = DenoiserModel(desk_config(), RngStream(52))
        assert model.params["decoder/w"].data.any()
        init_identity(model)
        assert model.decoder_is_zero()
        state = RngStream(53).standard_normal((3, 8)).astype(np.float32)
        assert not model.predict(state, state, t=1).any()

    def test_training_escapes_identity(self):
        model = DenoiserModel(desk_config(), RngStream(54))
        model.init_identity()
        rng = RngStream(55)
        state = rng.standard_normal((5, 8)).astype(np.float32)
        target = rng.standard_normal((5, 8)).astype(np.float32)
        with Tape() as tape:
            pred = model.forward(state, state, t=10)
            diff = sub(pred, Tensor(target))
            loss = tmean(mul(diff, diff))
        grads = backward(tape, loss)
        assert np.abs(grads[model.params["decoder/w"]]).max() > 0
        assert np.abs(grads[model.params["decoder/b"]]).max() > 0


class TestLearnedClassEmbeddings:
    def test_in_table_ids_are_differentiable(self):
        cfg = desk_config(cond_mode="learned_class_embedding", n_classes=12)
        model = DenoiserModel(cfg, RngStream(56))
        state = RngStream(57).standard_normal((5, 8)).astype(np.float32)
        with Tape() as tape:
            pred = model.forward(state, state, t=4, class_ids=[0, 3, 7, 2, 11])
            loss = tmean(mul(pred, pred))
        grads = backward(tape, loss)
        table_grad = grads.get(model.params["class_embed"])
        assert table_grad is not None and np.abs(table_grad).max() > 0

    def test_out_of_table_ids_fall_back_to_zeros(self):
        cfg = desk_config(cond_mode="learned_class_embedding", n_classes=4)
        model = DenoiserModel(cfg, RngStream(58))
        state = RngStream(59).standard_normal((2, 8)).astype(np.float32)
        a = model.predict(state, state, t=4, class_ids=[100, 200])
        b = model.predict(state, state, t=4, class_ids=None)
        np.testing.assert_array_equal(a, b)


class TestCheckpointFormat:
    def test_roundtrip_byte_exact(self, tmp_path):
        model = DenoiserModel(desk_config(), RngStream(60))
        p = tmp_path / "model.pdck"
        save_model(model, p)
        back = load_model(model.config, p)
        for name, param in model.params.items():
            assert back.params[name].data.tobytes() == param.data.tobytes()
        state = RngStream(61).standard_normal((5, 8)).astype(np.float32)
        np.testing.assert_array_equal(model.predict(state, state, 5), back.predict(state, state, 5))

    def test_mismatched_config_names_parameter(self, tmp_path):
        model = DenoiserModel(desk_config(), RngStream(62))
        p = tmp_path / "model.pdck"
        save_model(model, p)
        with pytest.raises(FormatError, match="shape mismatch.*decoder/w|shape mismatch") as exc:
            load_model(desk_config(proto_dim=16), p)
        assert exc.value.code == "dim_mismatch"
        assert "/" in str(exc.value)  # names the offending parameter

    def test_bad_magic_and_truncation(self, tmp_path):
        p = tmp_path / "bad.pdck"
        p.write_bytes(b"WHAT" + b"\x00" * 16)
        with pytest.raises(FormatError) as exc:
            load_arrays(p)
        assert exc.value.code == "bad_magic"
        model = DenoiserModel(tiny_config(), RngStream(63))
        q = tmp_path / "cut.pdck"
        save_model(model, q)
        q.write_bytes(q.read_bytes()[:-7])
        with pytest.raises(FormatError) as exc:
            load_arrays(q)
        assert exc.value.code == "truncated"

    def test_save_load_arrays_preserves_order_and_values(self, tmp_path):
        arrays = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.zeros(0, dtype=np.float32)}
        p = tmp_path / "arrays.pdck"
        save_arrays(arrays, p)
        back = load_arrays(p)
        assert list(back) == ["b", "a"]
        np.testing.assert_array_equal(back["b"], arrays["b"])
        assert back["a"].shape == (0,)


class TestConfigValidation:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            DenoiserConfig(d_model=10, n_heads=3)

    def test_learned_mode_needs_table(self):
        with pytest.raises(ValueError):
            DenoiserConfig(cond_mode="learned_class_embedding", n_classes=0)
