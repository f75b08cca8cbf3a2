import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from siftlab import autodiff as ad
from siftlab.autodiff import Tape
from siftlab.models import (FILTERS, ModelConfig, ModelConfigError, build_model, eval_loss, is_dense_only,
                            make_model, predict, select_trainable, transformer_param_count)


def _hand_count(d, L, V, T, C, ff_ratio=4, bias=False):
    ff = d * ff_ratio
    per_layer = 4 * d * d + (4 * d if bias else 0)     # q k v o
    per_layer += 2 * d + 2 * d                          # two layer norms
    per_layer += d * ff + ff + ff * d + d               # mlp
    return V * d + T * d + L * per_layer + 2 * d + d * C + C


def test_same_seed_identical_tensors():
    a, b = build_model(ModelConfig(seed=5)), build_model(ModelConfig(seed=5))
    assert list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build_model(ModelConfig(seed=6))
    assert a["layer.0.attn.q"].tobytes() != c["layer.0.attn.q"].tobytes()


def test_mlp_param_count():
    assert build_model(ModelConfig(kind="mlp", sizes=(4, 8, 2))).n_elements() == 58


@pytest.mark.parametrize("bias", [False, True])
def test_transformer_param_count(bias):
    cfg = ModelConfig(hidden=64, layers=2, heads=4, vocab=16, seq_len=8, n_out=16, attn_bias=bias)
    n = build_model(cfg).n_elements()
    assert n == transformer_param_count(cfg) == _hand_count(64, 2, 16, 8, 16, bias=bias)


def test_filters():
    p = build_model(ModelConfig(layers=2))
    qkvo = select_trainable(p, "QKVO")
    assert len(qkvo) == 8
    assert select_trainable(p, "V") == ["layer.0.attn.v", "layer.1.attn.v"]
    assert len(select_trainable(p, "QV")) == 4 and len(select_trainable(p, "QKV")) == 6
    assert set(qkvo) <= set(select_trainable(p, "ALL"))
    assert select_trainable(p, "HEAD-ONLY") == ["head.bias", "head.weight"]
    assert not set(select_trainable(p, "ALL")) & {"head.weight", "head.bias"}
    with pytest.raises(ValueError):
        select_trainable(p, "nonsense")


def test_filter_with_attention_bias():
    p = build_model(ModelConfig(layers=2, attn_bias=True))
    assert len(select_trainable(p, "QKVO")) == 16
    assert set(select_trainable(p, "ALL-ATTN")) == set(select_trainable(p, "QKVO"))


def test_filters_are_sorted_and_dense_only_rule():
    p = build_model(ModelConfig())
    for f in FILTERS:
        names = select_trainable(p, f)
        assert names == sorted(names)
    assert is_dense_only("layer.0.ln1.gain") and is_dense_only("head.weight")
    assert not is_dense_only("layer.0.attn.q")


@pytest.mark.parametrize("kw", [dict(hidden=30, heads=4), dict(layers=0), dict(kind="rnn"), dict(dtype="int8")])
def test_bad_config(kw):
    with pytest.raises(ModelConfigError):
        make_model(ModelConfig(**kw))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 7), st.integers(0, 1000))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 20
    s = ad.softmax(ad.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_causal_mask_blocks_future_tokens():
    cfg = ModelConfig(hidden=16, layers=2, heads=2, vocab=6, seq_len=5, n_out=6)
    model = make_model(cfg)
    p = model.init_params()
    x = np.array([[1, 2, 3, 4, 5]])
    y = x.copy()
    y[0, 4] = 0
    a = model.logits(Tape(), p, x).data
    b = model.logits(Tape(), p, y).data
    np.testing.assert_array_equal(a[:, :4], b[:, :4])
    assert not np.array_equal(a[:, 4], b[:, 4])


def test_mlp_batch_permutation_invariance():
    model = make_model(ModelConfig(kind="mlp", sizes=(3, 5, 4)))
    p = model.init_params()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 3))
    perm = rng.permutation(6)
    out = model.logits(Tape(), p, x).data
    np.testing.assert_array_equal(model.logits(Tape(), p, x[perm]).data, out[perm])


def test_eval_loss_matches_training_forward():
    cfg = ModelConfig(hidden=16, layers=1, heads=2, vocab=6, seq_len=4, n_out=6)
    model = make_model(cfg)
    p = model.init_params()
    rng = np.random.default_rng(1)
    batch = (rng.integers(0, 6, (5, 4)), rng.integers(0, 6, 5))
    assert eval_loss(model, p, batch) == float(model.forward(Tape(), p, batch).data)
    seq = (batch[0], rng.integers(0, 6, (5, 4)))
    assert eval_loss(model, p, seq) == float(model.forward(Tape(), p, seq).data)
    assert predict(model, p, batch[0]).shape == (5,)


def test_float32_model():
    p = build_model(ModelConfig(dtype="float32"))
    assert all(v.dtype == np.float32 for v in p.values())
    assert p.astype(np.float64)["head.weight"].dtype == np.float64
