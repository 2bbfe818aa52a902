import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msann import tensor as T
from msann.errors import DimensionError, VocabularyError
from msann.tags import TagVocabulary, TextualMLP, build_vocabulary, encode_tags, joint_feature


def mlp(vocab=6, hidden=5, out=4, seed=0):
    return TextualMLP(vocab, hidden, out, np.random.default_rng(seed))


def relu(x):
    return np.maximum(x, 0.0)


def test_zero_tags_zero_biases_give_zero_feature():
    net = mlp()
    out = encode_tags(net, np.zeros((2, 6)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_one_hot_selects_weight_row():
    net = TextualMLP(4, 4, 4, np.random.default_rng(0))
    w1 = np.random.default_rng(1).normal(size=(4, 4))
    net.hidden1.weight.data = w1
    net.hidden2.weight.data = np.eye(4)
    t = np.zeros((1, 4))
    t[0, 2] = 1
    np.testing.assert_array_equal(encode_tags(net, t).data[0], relu(w1[2]))


def test_two_layer_matmul_oracle():
    net = mlp()
    rng = np.random.default_rng(3)
    for p in net.parameters():
        p.data = rng.normal(size=p.shape)
    t = (rng.random((3, 6)) < 0.4).astype(float)
    w1, b1 = net.hidden1.weight.data, net.hidden1.bias.data
    w2, b2 = net.hidden2.weight.data, net.hidden2.bias.data
    oracle = relu(relu(t @ w1 + b1) @ w2 + b2)
    np.testing.assert_allclose(encode_tags(net, t).data, oracle, rtol=1e-13)


def test_width_mismatch_raises():
    with pytest.raises(VocabularyError):
        encode_tags(mlp(vocab=6), np.zeros((1, 5)))


def test_permutation_equivariance():
    net = mlp()
    perm = np.random.default_rng(2).permutation(6)
    t = (np.random.default_rng(4).random((3, 6)) < 0.5).astype(float)
    before = encode_tags(net, t).data
    net.hidden1.weight.data = net.hidden1.weight.data[perm]
    after = encode_tags(net, t[:, perm]).data
    np.testing.assert_allclose(before, after, rtol=1e-13)


@settings(max_examples=30, deadline=None)
@given(ones=st.integers(0, 50), seed=st.integers(0, 1000))
def test_dense_tag_vectors_stay_finite(ones, seed):
    net = TextualMLP(50, 16, 8, np.random.default_rng(seed))
    for p in net.parameters():
        p.data = np.clip(p.data, -1, 1)
    t = np.zeros((1, 50))
    t[0, :ones] = 1
    assert np.all(np.isfinite(encode_tags(net, t).data))


def test_joint_feature_examples():
    f = joint_feature(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0, 4.0]]))
    assert f.data.tolist() == [[1.0, 2.0, 3.0, 4.0]]
    z = joint_feature(T.Tensor(np.ones((2, 3))), T.Tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(z.data[:, 3:], 0.0)
    assert joint_feature(T.Tensor(np.ones((2, 128))), T.Tensor(np.ones((2, 128)))).shape == (2, 256)


def test_joint_feature_halves_recoverable():
    rng = np.random.default_rng(0)
    fv, ft = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    f = joint_feature(T.Tensor(fv), T.Tensor(ft)).data
    np.testing.assert_array_equal(f[:, :5], fv)
    np.testing.assert_array_equal(f[:, 5:], ft)


def test_joint_feature_width_mismatch():
    with pytest.raises(DimensionError):
        joint_feature(T.Tensor(np.ones((1, 3))), T.Tensor(np.ones((1, 4))))


def test_vocabulary_frequency_order():
    corpus = [["a", "b"], ["a", "b", "c"], ["a"]]
    assert build_vocabulary(corpus, 2).tags == ["a", "b"]


def test_vocabulary_ties_broken_lexicographically():
    assert build_vocabulary([["b", "a"], ["a", "b"]], 1).tags == ["a"]


def test_vocabulary_smaller_than_requested_warns():
    with pytest.warns(UserWarning):
        vocab = build_vocabulary([["x"], ["y", "x"]], 5)
    assert vocab.tags == ["x", "y"]


def test_vocabulary_rejects_empty_corpus():
    with pytest.raises(VocabularyError):
        build_vocabulary([[], []], 3)


def test_vocabulary_vectors_and_round_trip(tmp_path):
    vocab = TagVocabulary(["sky", "dog", "tree"])
    np.testing.assert_array_equal(vocab.vector(["tree", "unknown", "sky"]), [1.0, 0.0, 1.0])
    path = tmp_path / "vocab.txt"
    vocab.save(path)
    assert TagVocabulary.load(path) == vocab
