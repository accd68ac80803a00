import math

import numpy as np
import pytest

from dynsdpb import tensor as T
from dynsdpb.data import char_reverse, xor_grid
from dynsdpb.errors import ContractError, DimensionError, StateError
from dynsdpb.models import (
    EOS,
    ClassifierModel,
    DecoderModel,
    Model,
    generate,
    generate_batch,
    load_checkpoint,
    parameter_norms,
    read_checkpoint,
    save_checkpoint,
)
from dynsdpb.trainer import AdamW, _decoder_forward, evaluate


def fit(model, loss_fn, steps, lr):
    opt = AdamW(model.parameters(), lr=lr, total_steps=steps, warmup_frac=0.0, weight_decay=0.0)
    for _ in range(steps):
        opt.zero_grad()
        loss_fn().backward()
        opt.step()


# -- classifier ------------------------------------------------------------


def test_zero_head_gives_equal_logits_per_row():
    m = ClassifierModel(5, 4, hidden=(8, 8), zero_head=True)
    logits = m.forward(np.random.default_rng(0).normal(size=(6, 5))).data
    assert np.all(logits == logits[:, :1])


def test_classifier_batch_independence_and_permutation_equivariance():
    m = ClassifierModel(5, 3, hidden=(16, 16), seed=2)
    x = np.random.default_rng(1).normal(size=(8, 5))
    full = m.forward(x).data
    np.testing.assert_allclose(m.forward(x[3:4]).data, full[3:4], rtol=0, atol=1e-12)
    perm = np.random.default_rng(3).permutation(8)
    np.testing.assert_allclose(m.forward(x[perm]).data, full[perm], rtol=0, atol=1e-12)


def test_classifier_output_shape_and_width_check():
    m = ClassifierModel(5, 3)
    assert m.forward(np.zeros((7, 5))).shape == (7, 3)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((7, 4)))


def test_parameter_names_are_layer_qualified_and_unique():
    m = ClassifierModel(5, 3)
    names = list(m.params)
    assert len(names) == len(set(names))
    assert m.layer_names() == ["fc0", "fc1", "head"]


def test_embedding_input_classifier():
    m = ClassifierModel(4, 2, hidden=(8,), vocab_size=10)
    assert m.forward(np.array([[1, 2, 3], [4, 5, 6]])).shape == (2, 2)


def test_xor_reaches_99_percent_train_accuracy():
    data = xor_grid(n_train=200, n_test=50, seed=0)
    m = ClassifierModel(2, 2, hidden=(32, 32), seed=0)
    fit(m, lambda: T.cross_entropy(m.forward(data.x_train), data.y_train), steps=1000, lr=1e-2)
    assert evaluate(m, data, "train")[0] >= 0.99


def test_classifier_memorizes_32_examples():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(32, 20)), rng.integers(0, 3, size=32)
    m = ClassifierModel(20, 3, seed=0)
    fit(m, lambda: T.cross_entropy(m.forward(x), y), steps=300, lr=1e-3)
    assert (m.forward(x).data.argmax(axis=1) == y).mean() >= 0.99


# -- decoder ---------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_decoder_is_causal(seed):
    rng = np.random.default_rng(seed)
    m = DecoderModel(14, d_model=32, n_heads=4, n_blocks=2, max_len=16, seed=seed)
    tokens = rng.integers(0, 14, size=(2, 10))
    j = int(rng.integers(0, 9))
    perturbed = tokens.copy()
    perturbed[:, j + 1:] = (perturbed[:, j + 1:] + 1 + rng.integers(0, 12, size=(2, 9 - j))) % 14
    a = m.forward(tokens).data[:, : j + 1]
    b = m.forward(perturbed).data[:, : j + 1]
    np.testing.assert_array_equal(a, b)


def test_decoder_single_token_and_length_check():
    m = DecoderModel(14, max_len=8)
    assert m.forward([[3]]).shape == (1, 1, 14)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((1, 9), dtype=int))


def test_decoder_memorizes_one_sequence():
    m = DecoderModel(14, seed=0)
    seq = [2, 7, 4, 9, EOS]
    inp = np.array([[1] + seq[:-1]])
    fit(m, lambda: T.cross_entropy(m.forward(inp).reshape(5, 14), seq), steps=60, lr=3e-3)
    assert generate(m, [1], max_new=10).tokens == seq


def test_decoder_memorizes_32_examples():
    data = char_reverse(n_train=32, n_test=1, seed=0)
    m = DecoderModel(14, seed=0)
    fit(m, lambda: _decoder_forward(m, data, data.train)[1].mean(), steps=150, lr=3e-3)
    assert evaluate(m, data, "train")[0] >= 0.99


# -- generation ------------------------------------------------------------


def test_generate_zero_new_tokens():
    r = generate(DecoderModel(14, seed=0), [2, 3], max_new=0)
    assert r.tokens == [] and r.probs.shape == (0, 14) and r.termination == "max_len"


def test_generate_stops_on_end_token():
    m = DecoderModel(14, seed=0)
    m.params["head.bias"].data[EOS] = 100.0
    r = generate(m, [2, 3, 1], max_new=10)
    assert r.tokens == [EOS] and len(r) == 1 and r.termination == "end_token"


def test_generate_rejects_empty_prompt():
    with pytest.raises(ContractError):
        generate(DecoderModel(14), [], max_new=3)


def test_generate_seeded_length_fixture():
    # captured from the first run of this configuration
    assert len(generate(DecoderModel(14, seed=0), [2, 3, 4, 5, 1], max_new=20)) == 2
    r = generate(DecoderModel(14, seed=1), [2, 3, 4, 5, 1], max_new=20)
    assert len(r) == 20 and r.termination == "max_len"


def test_generation_rows_are_distributions_and_differentiable():
    m = DecoderModel(14, seed=1)
    results = generate_batch(m, [[2, 3, 1], [4, 5, 6, 7, 1]], max_new=6)
    for r in results:
        assert r.probs.shape[0] == len(r.tokens)
        assert np.abs(r.probs.data.sum(axis=1) - 1).max() <= 1e-9
    results[0].probs.sum(axis=0)[3].backward()
    assert m.params["head.weight"].grad is not None


def test_batched_generation_matches_single():
    m = DecoderModel(14, seed=1)
    prompts = [[2, 3, 1], [4, 5, 6, 7, 8, 1], [9, 1]]
    batched = generate_batch(m, prompts, max_new=7)
    for p, b in zip(prompts, batched):
        single = generate(m, p, max_new=7)
        assert single.tokens == b.tokens
        np.testing.assert_allclose(single.probs.data, b.probs.data, atol=1e-12)


def test_prompt_at_max_len_yields_empty_generation():
    m = DecoderModel(14, max_len=6)
    r = generate(m, [2, 3, 4, 5, 6, 1], max_new=4)
    assert len(r) == 0


# -- gradient norms --------------------------------------------------------


def test_parameter_norms_before_backward():
    with pytest.raises(StateError):
        parameter_norms(ClassifierModel(3, 2, hidden=(4,)))


def test_parameter_norms_zero_loss():
    m = ClassifierModel(3, 2, hidden=(4,))
    (m.forward(np.ones((2, 3))).sum() * 0.0).backward()
    assert all(v == 0.0 for v in parameter_norms(m).values())


def test_parameter_norm_of_single_linear_layer():
    class Linear(Model):
        def __init__(self):
            super().__init__()
            self._add("lin.weight", np.random.default_rng(0).normal(size=(4, 6)))

    m = Linear()
    x = np.array([[1.0, -2.0, 0.5, 3.0]])
    (T.Tensor(x) @ m.params["lin.weight"]).sum().backward()
    assert parameter_norms(m)["lin"] == pytest.approx(np.linalg.norm(x) * math.sqrt(6), rel=1e-12)


# -- checkpoint ------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = DecoderModel(14, d_model=16, n_heads=2, n_blocks=1, seed=4)
    path = tmp_path / "ck.npz"
    save_checkpoint(m, path)
    stored = read_checkpoint(path)
    assert list(stored) == list(m.params)
    other = load_checkpoint(DecoderModel(14, d_model=16, n_heads=2, n_blocks=1, seed=5), path)
    for name, p in m.params.items():
        assert other.params[name].data.tobytes() == p.data.tobytes()
        assert other.params[name].shape == p.shape
