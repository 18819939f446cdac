import numpy as np
import pytest

from hvqcodec import autograd as ag
from hvqcodec.autograd import Tensor
from hvqcodec.checkpoint import (
    CheckpointError,
    model_from_bytes,
    model_hash,
    model_to_bytes,
    load_model,
    save_model,
)
from hvqcodec.model import HierarchicalVQModel, ModelConfig, masked_recon, objective

from conftest import tiny_config


class TestConfig:
    def test_defaults(self):
        c = ModelConfig()
        assert (c.levels, c.total_stride, c.codebook_dim) == (2, 4, 64)
        assert ModelConfig.from_json(c.to_json()) == c

    def test_rejects_mismatched_lengths(self):
        with pytest.raises(ValueError):
            tiny_config(stage_channels=(6, 8, 10))
        with pytest.raises(ValueError):
            tiny_config(stage_strides=(3, 2))


class TestShapes:
    def test_default_index_grids(self):
        model = HierarchicalVQModel(tiny_config(block_size_train=64))
        assert model.index_grid_shapes(64, 64) == [(32, 32), (16, 16)]

    def test_decoder_mirrors_encoder(self, tiny_model):
        enc, dec = tiny_model.stage_shapes(16, 16)
        assert dec == enc[:-1]

    def test_forward_shapes(self, rng, tiny_model):
        x = Tensor(rng.standard_normal((3, 1, 16, 24)))
        with ag.no_grad():
            x_hat, hier = tiny_model(x)
        assert x_hat.shape == x.shape
        assert [i.shape for i in hier.indices] == [(3, 8, 12), (3, 4, 6)]
        assert hier.z_q_combined.shape == (3, 4 + 6, 8, 12)

    @pytest.mark.parametrize("stages", [1, 3])
    def test_other_depths(self, rng, stages):
        cfg = tiny_config(stage_channels=(6, 8, 8)[:stages], stage_strides=(2,) * stages,
                          codebook_sizes=(8,) * stages)
        model = HierarchicalVQModel(cfg)
        x = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        idx = model.encode_indices(x)
        assert len(idx) == stages
        assert model.decode_indices(idx).shape == x.shape

    def test_rejects_indivisible_block(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.encode(Tensor(np.zeros((1, 1, 18, 16))))

    def test_index_domain_matches_forward(self, rng, tiny_model):
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        with ag.no_grad():
            x_hat, hier = tiny_model(Tensor(x))
        np.testing.assert_array_equal(tiny_model.decode_indices(hier.indices), x_hat.data)
        for a, b in zip(tiny_model.encode_indices(x), hier.indices):
            np.testing.assert_array_equal(a, b)

    def test_same_seed_same_weights(self):
        a = model_to_bytes(HierarchicalVQModel(tiny_config()))
        assert a == model_to_bytes(HierarchicalVQModel(tiny_config()))
        assert a != model_to_bytes(HierarchicalVQModel(tiny_config(seed=5)))


class TestObjective:
    def test_full_mask_equals_plain_mse(self, rng):
        x = rng.standard_normal((2, 1, 4, 4))
        xh = Tensor(rng.standard_normal((2, 1, 4, 4)), dtype=np.float64)
        got = masked_recon(x, xh, np.ones(x.shape)).item()
        assert got == pytest.approx(np.mean((x - xh.data) ** 2))

    def test_masked_points_ignored(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        xh = x.copy()
        m = np.ones(x.shape)
        m[..., 0, :] = 0
        xh[..., 0, :] += 100.0
        assert masked_recon(x, Tensor(xh, dtype=np.float64), m).item() == 0.0

    def test_weights_scale_terms(self):
        x = np.zeros((1, 1, 1, 2))
        xh = Tensor(np.array([[[[1.0, 1.0]]]]), dtype=np.float64)
        w = np.array([[[[2.0, 0.5]]]])
        assert masked_recon(x, xh, np.ones(x.shape), w).item() == pytest.approx(1.25)

    def test_all_masked_is_zero_not_nan(self):
        xh = Tensor(np.ones((1, 1, 2, 2)), dtype=np.float64)
        assert masked_recon(np.zeros((1, 1, 2, 2)), xh, np.zeros((1, 1, 2, 2))).item() == 0.0

    def test_total_combines_terms(self, rng, tiny_model):
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        m = np.ones(x.shape)
        x_hat, hier = tiny_model(Tensor(x))
        loss = objective(x, x_hat, m, hier.commitment, tiny_model.config)
        v = loss.as_floats()
        assert v["total"] == pytest.approx(2.0 * v["l_recon"] + 0.25 * v["l_q"], rel=1e-5)
        assert v["l_fft"] == 0.0

    def test_fft_term_added(self, rng):
        cfg = tiny_config(lambda_fft=0.5)
        model = HierarchicalVQModel(cfg)
        x = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        x_hat, hier = model(Tensor(x))
        v = objective(x, x_hat, np.ones(x.shape), hier.commitment, cfg).as_floats()
        assert v["l_fft"] > 0
        assert v["total"] == pytest.approx(2 * v["l_recon"] + 0.25 * v["l_q"] + 0.5 * v["l_fft"], rel=1e-5)

    def test_gradient_reaches_encoder_not_codebook(self, rng):
        model = HierarchicalVQModel(tiny_config())
        x = rng.standard_normal((2, 1, 16, 16)).astype(np.float32)
        x_hat, hier = model(Tensor(x))
        before = [cb.entries.copy() for cb in model.codebooks]
        objective(x, x_hat, np.ones(x.shape), hier.commitment, model.config).total.backward()
        assert np.abs(model.pre1.kernel.grad).sum() > 0
        for cb, b in zip(model.codebooks, before):
            np.testing.assert_array_equal(cb.entries, b)


class TestCheckpoint:
    def test_round_trip_is_exact(self, rng, tmp_path):
        model = HierarchicalVQModel(tiny_config(seed=3))
        model.codebooks[0].entries += 0.5
        h = save_model(model, tmp_path / "m.hvqm")
        back = load_model(tmp_path / "m.hvqm")
        assert model_hash(back) == h
        assert model_to_bytes(back) == model_to_bytes(model)
        x = rng.standard_normal((1, 1, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(back.decode_indices(back.encode_indices(x)),
                                      model.decode_indices(model.encode_indices(x)))

    def test_corruption_detected(self):
        blob = bytearray(model_to_bytes(HierarchicalVQModel(tiny_config())))
        blob[100] ^= 1
        with pytest.raises(CheckpointError):
            model_from_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            model_from_bytes(b"HVQX" + bytes(blob[4:]))
        with pytest.raises(CheckpointError):
            model_from_bytes(b"")
