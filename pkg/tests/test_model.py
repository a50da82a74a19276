import numpy as np
import pytest

from helpers import rel_err, sample_param_indices
from lrimpute.autodiff import Tensor, backward
from lrimpute.errors import ConfigError, ContractError, ParseError
from lrimpute.losses import combined_loss
from lrimpute.model import (
    ModelConfig,
    ModelParams,
    embedded_aggregation,
    embedding_attention_factors,
    forward_batch,
    input_embed,
    load_checkpoint,
    projected_attention,
    readout,
    save_checkpoint,
    spatial_block,
    temporal_block,
    time_encoding,
)
from lrimpute.spectral import svd_values

TINY = dict(n_nodes=4, window=8, input_hidden=8, node_embed_total=16,
            node_embed_key_dim=4, model_dim=16, projected_dim=3, n_layers=2,
            ffn_hidden=24, steps_per_day=8)


def tiny_cfg(**overrides):
    return ModelConfig(**{**TINY, **overrides})


def tiny_inputs(cfg, seed=0, batch=()):
    rng = np.random.default_rng(seed)
    shape = batch + (cfg.n_nodes, cfg.window)
    mask = (rng.random(shape) < 0.7).astype(np.float64)
    x = rng.normal(size=shape) * mask
    days = np.broadcast_to(np.arange(cfg.window) % cfg.steps_per_day, shape[:-2] + (cfg.window,))
    return x, mask, np.array(days)


def _np_softmax(m, axis):
    e = np.exp(m - m.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def expanded_temporal_oracle(z, lp, cfg):
    """Step-by-step expanded attention: full T x T map times values."""
    head = cfg.model_dim // cfg.n_heads
    inv = 1.0 / np.sqrt(head)
    proj = lp["projector"].data
    q_in = proj @ lp["in.wq"].data
    k_in = z @ lp["in.wk"].data
    v_in = z @ lp["in.wv"].data
    q_out = z @ lp["out.wq"].data
    k_out = proj @ lp["out.wk"].data
    outs, implieds = [], []
    for h in range(cfg.n_heads):
        sl = slice(h * head, (h + 1) * head)
        s_in = _np_softmax(q_in[:, sl] @ k_in[:, sl].T * inv, axis=-1)      # C x T
        s_out = _np_softmax(q_out[:, sl] @ k_out[:, sl].T * inv, axis=-1)   # T x C
        implied = s_out @ s_in                                              # T x T
        summary_h = s_in @ v_in[:, sl]
        outs.append((s_out, summary_h))
        implieds.append(implied)
    summary = np.concatenate([s for _, s in outs], axis=-1)
    v_out = summary @ lp["out.wv"].data
    result = np.concatenate(
        [s_out @ v_out[:, h * head:(h + 1) * head] for h, (s_out, _) in enumerate(outs)],
        axis=-1)
    return result, implieds


def layer_tensors(params, layer):
    return {key: params[f"layer{layer}.temporal.{key}"]
            for key in ("projector", "in.wq", "in.wk", "in.wv",
                        "out.wq", "out.wk", "out.wv")}


class TestTimeEncoding:
    def test_midnight_is_sin_zero_cos_one(self):
        enc = time_encoding(np.zeros(3), steps_per_day=24)
        assert np.allclose(enc, [[0.0, 1.0]] * 3)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            time_encoding(np.array([24.0]), steps_per_day=24)
        with pytest.raises(ContractError):
            time_encoding(np.array([-1.0]), steps_per_day=24)


class TestInputEmbed:
    def test_output_shape(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=0)
        x, mask, days = tiny_inputs(cfg)
        out = input_embed(Tensor(x), mask, days, cfg, params)
        assert out.shape == (cfg.n_nodes, cfg.window, cfg.model_dim)

    def test_embeddings_distinguish_identical_inputs(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=0)
        x = np.zeros((cfg.n_nodes, cfg.window))
        days = np.arange(cfg.window) % cfg.steps_per_day
        out = input_embed(Tensor(x), np.ones_like(x), days, cfg, params).data
        diff = np.abs(out[0] - out[1]).max()
        assert diff > 1e-6

    def test_nonzero_outside_mask_rejected(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=0)
        x, mask, days = tiny_inputs(cfg)
        x = x + (1 - mask)
        with pytest.raises(ContractError):
            input_embed(Tensor(x), mask, days, cfg, params)

    def test_window_mismatch_needs_optin(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=0)
        t2 = cfg.window + 4
        x = np.zeros((cfg.n_nodes, t2))
        days = np.arange(t2) % cfg.steps_per_day
        with pytest.raises(ContractError):
            input_embed(Tensor(x), np.ones_like(x), days, cfg, params)
        out = input_embed(Tensor(x), np.ones_like(x), days, cfg, params,
                          strict_window=False)
        assert out.shape == (cfg.n_nodes, t2, cfg.model_dim)


class TestTemporalAttention:
    @pytest.mark.parametrize("heads", [1, 2])
    def test_matches_expanded_form_oracle(self, heads):
        cfg = tiny_cfg(n_heads=heads)
        params = ModelParams.initialize(cfg, seed=1)
        lp = layer_tensors(params, 0)
        z = np.random.default_rng(2).normal(size=(cfg.window, cfg.model_dim))
        ours = projected_attention(Tensor(z), lp, cfg).data
        oracle, _ = expanded_temporal_oracle(z, lp, cfg)
        assert np.max(np.abs(ours - oracle)) < 1e-10

    def test_implied_matrix_rank_at_most_projected_dim(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=3)
        z = np.random.default_rng(4).normal(size=(cfg.window, cfg.model_dim))
        _, implieds = expanded_temporal_oracle(z, layer_tensors(params, 0), cfg)
        for implied in implieds:
            sv = svd_values(implied).values
            assert sv[cfg.projected_dim] < 1e-8 * sv[0]

    def test_attention_factor_rows_stochastic(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=5)
        z = np.random.default_rng(6).normal(size=(cfg.n_nodes, cfg.window, cfg.model_dim))
        collect = []
        projected_attention(Tensor(z), layer_tensors(params, 0), cfg, collect=collect)
        entry = collect[0]
        assert np.allclose(entry["inflow"].sum(axis=-1), 1.0, atol=1e-9)
        assert np.allclose(entry["outflow"].sum(axis=-1), 1.0, atol=1e-9)


class TestSpatialAttention:
    def test_attention_rows_sum_to_one(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=7)
        q_soft, k_soft = embedding_attention_factors(0, cfg, params)
        full = q_soft.data @ k_soft.data.T
        assert np.allclose(full.sum(axis=1), 1.0, atol=1e-9)

    def test_rank_at_most_embed_key_dim(self):
        cfg = tiny_cfg(n_nodes=8, node_embed_total=16, node_embed_key_dim=3)
        params = ModelParams.initialize(cfg, seed=8)
        q_soft, k_soft = embedding_attention_factors(0, cfg, params)
        sv = svd_values(q_soft.data @ k_soft.data.T).values
        assert sv[cfg.node_embed_key_dim] < 1e-8 * sv[0]

    def test_association_order_matches_full_materialization(self):
        cfg = tiny_cfg(n_nodes=8, node_embed_total=16)
        params = ModelParams.initialize(cfg, seed=9)
        z = np.random.default_rng(10).normal(size=(cfg.n_nodes, cfg.window, cfg.model_dim))
        q_soft, k_soft = embedding_attention_factors(0, cfg, params)
        ours = embedded_aggregation(Tensor(z), q_soft, k_soft).data
        full = q_soft.data @ k_soft.data.T
        expected = np.einsum("mn,ntd->mtd", full, z)
        assert np.max(np.abs(ours - expected)) < 1e-10


class TestForward:
    def test_shape_and_finite(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=11)
        x, mask, days = tiny_inputs(cfg, seed=12)
        out = forward_batch(Tensor(x), mask, days, cfg, params)
        assert out.shape == (cfg.n_nodes, cfg.window)
        assert np.all(np.isfinite(out.data))

    def test_batched_matches_single(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=13)
        x, mask, days = tiny_inputs(cfg, seed=14, batch=(3,))
        stacked = forward_batch(Tensor(x), mask, days, cfg, params).data
        for b in range(3):
            single = forward_batch(Tensor(x[b]), mask[b], days[b], cfg, params).data
            assert np.allclose(stacked[b], single, atol=1e-12)

    def test_node_permutation_equivariance(self):
        cfg = tiny_cfg(n_nodes=5)
        params = ModelParams.initialize(cfg, seed=15)
        x, mask, days = tiny_inputs(cfg, seed=16)
        out = forward_batch(Tensor(x), mask, days, cfg, params).data
        perm = np.random.default_rng(17).permutation(cfg.n_nodes)
        permuted = params.clone()
        permuted["node_embed"].data = params["node_embed"].data[perm]
        out_perm = forward_batch(Tensor(x[perm]), mask[perm], days, cfg, permuted).data
        assert np.allclose(out_perm, out[perm], atol=1e-10)

    def test_identical_embeddings_give_identical_rows(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=18)
        params["node_embed"].data = np.broadcast_to(
            params["node_embed"].data[0], params["node_embed"].shape).copy()
        x = np.zeros((cfg.n_nodes, cfg.window))
        days = np.arange(cfg.window) % cfg.steps_per_day
        out = forward_batch(Tensor(x), np.ones_like(x), days, cfg, params).data
        assert np.allclose(out, out[0], atol=1e-12)

    def test_no_time_mixing_outside_temporal_attention(self):
        # With the temporal block ablated, step t of the output depends only
        # on step t of the input.
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=19)
        x, mask, days = tiny_inputs(cfg, seed=20)

        def non_temporal_forward(values):
            h = input_embed(Tensor(values), mask, days, cfg, params)
            for layer in range(cfg.n_layers):
                h = spatial_block(h, layer, cfg, params)
            return readout(h, params).data

        base = non_temporal_forward(x)
        t0 = 3
        bumped = x.copy()
        bumped[:, t0] += mask[:, t0] * 0.37
        out = non_temporal_forward(bumped)
        others = np.delete(np.arange(cfg.window), t0)
        assert np.array_equal(out[:, others], base[:, others])
        assert np.any(out[:, t0] != base[:, t0])


def test_end_to_end_gradients_every_parameter_group():
    cfg = tiny_cfg()
    params = ModelParams.initialize(cfg, seed=21)
    rng = np.random.default_rng(22)
    # Nudge every parameter off its init so no relu sits exactly at its kink.
    for _, t in params.items():
        t.data = t.data + rng.normal(scale=0.05, size=t.shape)
    x, mask, days = tiny_inputs(cfg, seed=23, batch=(2,))
    whiten = mask * (np.random.default_rng(24).random(mask.shape) < 0.4)
    missing = 1.0 - mask * (1.0 - whiten)
    target = np.random.default_rng(25).normal(size=x.shape)

    def loss_value():
        pred = forward_batch(Tensor(x), mask, days, cfg, params)
        return combined_loss(pred, Tensor(target), whiten, missing, 0.05).total

    params.zero_grads()
    backward(loss_value())
    h = 1e-5
    worst = 0.0
    for name in params.names():
        t = params[name]
        for idx in sample_param_indices(rng, t, 5):
            orig = t.data[idx]
            t.data[idx] = orig + h
            fp = loss_value().item()
            t.data[idx] = orig - h
            fm = loss_value().item()
            t.data[idx] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(t.grad[idx], num))
    assert worst < 1e-4


class TestConfigValidation:
    def test_projected_dim_must_be_below_window(self):
        with pytest.raises(ConfigError):
            tiny_cfg(projected_dim=8)

    def test_embed_key_below_model_dim(self):
        with pytest.raises(ConfigError):
            tiny_cfg(node_embed_key_dim=16)

    def test_embed_total_divisible_by_window(self):
        with pytest.raises(ConfigError):
            tiny_cfg(node_embed_total=15)

    def test_heads_divide_model_dim(self):
        with pytest.raises(ConfigError):
            tiny_cfg(n_heads=3)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({**TINY, "dropout": 0.1})

    def test_positive_dims(self):
        with pytest.raises(ConfigError):
            tiny_cfg(n_layers=0)


class TestCheckpoint:
    def test_roundtrip_and_byte_stability(self, tmp_path):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=26)
        mean = np.arange(cfg.n_nodes, dtype=float)
        std = np.ones(cfg.n_nodes)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, cfg, params, mean, std, seed=3, step=17)
        save_checkpoint(p2, cfg, params, mean, std, seed=3, step=17)
        assert p1.read_bytes() == p2.read_bytes()

        cfg2, params2, (mean2, std2), seed, step = load_checkpoint(p1)
        assert cfg2 == cfg and seed == 3 and step == 17
        assert np.array_equal(mean2, mean) and np.array_equal(std2, std)
        for name in params.names():
            assert np.array_equal(params2[name].data, params[name].data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ParseError):
            load_checkpoint(path)

    def test_parameter_count_reported(self):
        cfg = tiny_cfg()
        params = ModelParams.initialize(cfg, seed=0)
        again = ModelParams.initialize(cfg, seed=99)
        assert params.n_params == again.n_params > 0


def test_multi_head_forward_and_blocks():
    cfg = tiny_cfg(n_heads=2)
    params = ModelParams.initialize(cfg, seed=27)
    x, mask, days = tiny_inputs(cfg, seed=28)
    h = input_embed(Tensor(x), mask, days, cfg, params)
    h = temporal_block(h, 0, cfg, params)
    assert h.shape == (cfg.n_nodes, cfg.window, cfg.model_dim)
    out = forward_batch(Tensor(x), mask, days, cfg, params)
    assert np.all(np.isfinite(out.data))
