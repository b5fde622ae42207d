import numpy as np
import pytest

from reslstm.cells import CellDims, GateStyle, ResidualVariant, cell_step, zero_state
from reslstm.errors import FormatError, VersionError
from reslstm.network import (
    NetworkConfig,
    backward,
    count_params,
    forward,
    init_params,
    load_model,
    param_arrays,
    params_to_vector,
    save_model,
    vector_to_params,
)
from reslstm.training import sequence_loss

TINY = NetworkConfig(
    depth=2,
    dims=CellDims(n_x=7, n_c=6, n_r=3, n_nr=2),
    style=GateStyle.STANDARD,
    variant=ResidualVariant.RES1,
    n_out=4,
)


def tiny_config(style=GateStyle.STANDARD, variant=ResidualVariant.NONE, depth=2):
    return NetworkConfig(
        depth=depth,
        dims=CellDims(n_x=7, n_c=6, n_r=3, n_nr=2),
        style=style,
        variant=variant,
        n_out=4,
    )


class TestInitParams:
    def test_deterministic(self):
        a = params_to_vector(init_params(TINY, 42))
        b = params_to_vector(init_params(TINY, 42))
        assert a.tobytes() == b.tobytes()

    def test_seeds_differ(self):
        a = params_to_vector(init_params(TINY, 1))
        b = params_to_vector(init_params(TINY, 2))
        assert a.tobytes() != b.tobytes()

    def test_fan_in_bound(self):
        cfg = NetworkConfig(
            depth=1, dims=CellDims(4, 3, 2, 0), style=GateStyle.FAST,
            variant=ResidualVariant.NONE, n_out=2,
        )
        p = init_params(cfg, 0)
        assert np.all(np.abs(p.layers[0].w_ix) <= 0.5)  # fan_in 4 -> bound 1/2
        assert np.all(np.abs(p.layers[0].w_ir) <= 1 / np.sqrt(2))

    def test_biases_and_peepholes_zero(self):
        p = init_params(TINY, 3)
        for lp in p.layers:
            for name in ("b_i", "b_f", "b_o", "b_g", "w_ic", "w_fc", "w_oc"):
                assert not getattr(lp, name).any()
        assert not p.b_out.any()


class TestCountParams:
    def test_tiny_hand_count(self):
        cfg = NetworkConfig(
            depth=1, dims=CellDims(2, 3, 1, 1), style=GateStyle.FAST,
            variant=ResidualVariant.NONE, n_out=2,
        )
        assert count_params(cfg) == 60  # 36 gates + 12 biases + 6 proj + 6 head

    def test_matches_allocation_sweep(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            cfg = NetworkConfig(
                depth=int(rng.integers(1, 5)),
                dims=CellDims(
                    int(rng.integers(1, 17)), int(rng.integers(1, 17)),
                    int(rng.integers(1, 17)), int(rng.integers(0, 17)),
                ),
                style=[GateStyle.STANDARD, GateStyle.FAST][rng.integers(2)],
                variant=list(ResidualVariant)[rng.integers(4)],
                n_out=int(rng.integers(2, 20)),
            )
            allocated = sum(a.size for a in param_arrays(init_params(cfg, 1)))
            assert count_params(cfg) == allocated, cfg

    @pytest.mark.parametrize(
        "style,variant,per_depth",
        [
            (GateStyle.STANDARD, ResidualVariant.NONE,
             {2: 9_576_336, 3: 14_302_096, 4: 19_027_856}),
            (GateStyle.STANDARD, ResidualVariant.RES1,
             {2: 12_504_976, 3: 18_803_600, 4: 25_102_224}),
            (GateStyle.STANDARD, ResidualVariant.RES2,
             {2: 9_992_080, 3: 14_979_984, 4: 19_967_888}),
            (GateStyle.STANDARD, ResidualVariant.RES3,
             {2: 10_516_368, 3: 15_766_416, 4: 21_016_464}),
            (GateStyle.FAST, ResidualVariant.NONE,
             {2: 9_570_192, 3: 14_292_880, 4: 19_015_568}),
            (GateStyle.FAST, ResidualVariant.RES1,
             {2: 12_498_832, 3: 18_794_384, 4: 25_089_936}),
            (GateStyle.FAST, ResidualVariant.RES2,
             {2: 9_985_936, 3: 14_970_768, 4: 19_955_600}),
            (GateStyle.FAST, ResidualVariant.RES3,
             {2: 10_510_224, 3: 15_757_200, 4: 21_004_176}),
        ],
        ids=lambda v: str(v) if not isinstance(v, dict) else "counts",
    )
    def test_reference_acoustic_dims(self, style, variant, per_depth):
        """Frozen exact counts for the 1024-cell/512-projection geometry
        with a 300-dim input and 1936 targets."""
        for depth, expect in per_depth.items():
            cfg = NetworkConfig(
                depth=depth, dims=CellDims(300, 1024, 512, 0),
                style=style, variant=variant, n_out=1936,
            )
            assert count_params(cfg) == expect

    def test_fast_standard_gap_is_peepholes(self):
        for depth in (2, 3, 4):
            std = NetworkConfig(depth=depth, dims=CellDims(300, 1024, 512, 0),
                                style=GateStyle.STANDARD,
                                variant=ResidualVariant.NONE, n_out=1936)
            fast = NetworkConfig(depth=depth, dims=CellDims(300, 1024, 512, 0),
                                 style=GateStyle.FAST,
                                 variant=ResidualVariant.NONE, n_out=1936)
            assert count_params(std) - count_params(fast) == 3 * 1024 * depth


class TestForward:
    def test_zero_params_zero_logits(self):
        from reslstm.network import zero_params

        for variant in ResidualVariant:
            cfg = tiny_config(variant=variant)
            p = zero_params(cfg)
            logits, _ = forward(p, cfg, np.random.default_rng(0).standard_normal((6, 7)))
            assert not logits.any()

    def test_depth1_t1_is_one_cell_step_plus_affine(self):
        cfg = NetworkConfig(
            depth=1, dims=CellDims(7, 6, 3, 2), style=GateStyle.STANDARD,
            variant=ResidualVariant.RES2, n_out=4,
        )
        p = init_params(cfg, 9)
        x = np.random.default_rng(10).standard_normal(7)
        logits, _ = forward(p, cfg, x.reshape(1, -1))
        y, _, _ = cell_step(cfg.dims, cfg.style, cfg.variant, p.layers[0],
                            x, zero_state(cfg.dims))
        np.testing.assert_array_equal(logits[0], p.w_out @ y + p.b_out)

    def test_time_shift_with_zero_padding(self):
        """Zero frames under zero state and zero biases leave the state at
        zero, so prepending k of them only prepends k constant logit rows."""
        cfg = tiny_config(variant=ResidualVariant.RES3)
        p = init_params(cfg, 4)  # biases init to zero
        rng = np.random.default_rng(11)
        frames = rng.standard_normal((5, 7))
        k = 3
        padded = np.vstack([np.zeros((k, 7)), frames])
        base, _ = forward(p, cfg, frames)
        shifted, _ = forward(p, cfg, padded)
        np.testing.assert_array_equal(shifted[k:], base)

    def test_deterministic(self):
        cfg = TINY
        p = init_params(cfg, 5)
        frames = np.random.default_rng(6).standard_normal((9, 7))
        a, _ = forward(p, cfg, frames)
        b, _ = forward(p, cfg, frames)
        assert a.tobytes() == b.tobytes()


class TestBackward:
    def test_zero_cotangent(self):
        cfg = TINY
        p = init_params(cfg, 7)
        frames = np.random.default_rng(8).standard_normal((4, 7))
        logits, trace = forward(p, cfg, frames)
        g = backward(p, cfg, trace, np.zeros_like(logits))
        assert not params_to_vector(g).any()

    def test_b_out_gradient_is_dlogits_sum(self):
        cfg = TINY
        p = init_params(cfg, 7)
        rng = np.random.default_rng(9)
        frames = rng.standard_normal((4, 7))
        d_logits = rng.standard_normal((4, 4))
        _, trace = forward(p, cfg, frames)
        g = backward(p, cfg, trace, d_logits)
        np.testing.assert_allclose(g.b_out, d_logits.sum(axis=0), rtol=1e-12)

    @pytest.mark.parametrize("style", [GateStyle.STANDARD, GateStyle.FAST],
                             ids=lambda s: s.value)
    @pytest.mark.parametrize("variant", list(ResidualVariant), ids=lambda v: v.value)
    def test_finite_difference_oracle(self, style, variant):
        """Full-network BPTT vs central differences at depth 2, T=4."""
        cfg = tiny_config(style=style, variant=variant)
        rng = np.random.default_rng(21)
        theta = params_to_vector(init_params(cfg, 21))
        theta += 0.3 * rng.standard_normal(theta.shape)
        frames = rng.standard_normal((4, 7))
        labels = rng.integers(0, 4, size=4)

        def loss_at(vec):
            lg, _ = forward(vector_to_params(vec, cfg), cfg, frames)
            return sequence_loss(lg, labels)[0]

        p = vector_to_params(theta, cfg)
        logits, trace = forward(p, cfg, frames)
        _, d_logits = sequence_loss(logits, labels)
        analytic = params_to_vector(backward(p, cfg, trace, d_logits))

        eps = 1e-5
        numeric = np.empty_like(theta)
        for k in range(theta.shape[0]):
            saved = theta[k]
            theta[k] = saved + eps
            up = loss_at(theta)
            theta[k] = saved - eps
            down = loss_at(theta)
            theta[k] = saved
            numeric[k] = (up - down) / (2 * eps)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
        )
        assert rel.max() < 1e-4, f"max rel err {rel.max():.2e}"


class TestSerialization:
    def test_round_trip_bit_exact_forward(self, tmp_path):
        rng = np.random.default_rng(30)
        for i, variant in enumerate(ResidualVariant):
            cfg = tiny_config(
                style=[GateStyle.STANDARD, GateStyle.FAST][i % 2], variant=variant
            )
            p = init_params(cfg, 100 + i)
            path = tmp_path / f"model{i}.rlm"
            save_model(p, cfg, path)
            p2, cfg2 = load_model(path)
            assert cfg2 == cfg
            frames = rng.standard_normal((6, 7))
            before, _ = forward(p, cfg, frames)
            after, _ = forward(p2, cfg2, frames)
            assert before.tobytes() == after.tobytes()

    def test_truncation_detected(self, tmp_path):
        cfg = TINY
        save_model(init_params(cfg, 0), cfg, tmp_path / "m.rlm")
        blob = (tmp_path / "m.rlm").read_bytes()
        (tmp_path / "cut.rlm").write_bytes(blob[:-1])
        with pytest.raises(FormatError, match="truncated"):
            load_model(tmp_path / "cut.rlm")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.rlm").write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(FormatError, match="magic"):
            load_model(tmp_path / "bad.rlm")

    def test_unknown_version(self, tmp_path):
        cfg = TINY
        save_model(init_params(cfg, 0), cfg, tmp_path / "m.rlm")
        blob = bytearray((tmp_path / "m.rlm").read_bytes())
        blob[4:8] = (99).to_bytes(4, "little")
        (tmp_path / "v99.rlm").write_bytes(bytes(blob))
        with pytest.raises(VersionError, match="supported versions: 1"):
            load_model(tmp_path / "v99.rlm")

    def test_trailing_bytes_detected(self, tmp_path):
        cfg = TINY
        save_model(init_params(cfg, 0), cfg, tmp_path / "m.rlm")
        blob = (tmp_path / "m.rlm").read_bytes()
        (tmp_path / "fat.rlm").write_bytes(blob + b"\x00")
        with pytest.raises(FormatError, match="trailing"):
            load_model(tmp_path / "fat.rlm")

    def test_error_reports_offset(self, tmp_path):
        (tmp_path / "short.rlm").write_bytes(b"RLM1\x01\x00")
        with pytest.raises(FormatError) as exc:
            load_model(tmp_path / "short.rlm")
        assert exc.value.offset is not None
