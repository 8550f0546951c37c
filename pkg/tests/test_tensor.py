import math

import numpy as np
import pytest

from prealign import PrealignError
from prealign.tensor import (
    add,
    as_tensor,
    attention,
    concat,
    cross_entropy,
    DimensionError,
    embedding,
    gelu,
    gradient_check,
    layer_norm,
    matmul,
    mul,
    OpCounter,
    ParamStore,
    recorded,
    reshape,
    Rng,
    scale,
    softmax_row,
    take,
    Tape,
    Tensor,
    total,
    transpose,
    UndefinedMeanError,
)


def contracted(t, seed=0):
    """Scalar tensor: weighted sum of all entries of 't', with fixed random weights"""
    weights = Rng(seed, "weights", *t.shape).normal(t.data.shape)
    return total(mul(t, Tensor(weights)))


def random(shape, seed=0, name="x"):
    return Rng(seed, name).normal(shape)


@pytest.mark.parametrize("seed", range(3))
def test_gradients(seed):
    a, b = random((3, 4), seed, "a"), random((4, 2), seed, "b")
    assert gradient_check(lambda x, y: contracted(matmul(x, y), seed), [a, b]) < 1e-6
    assert gradient_check(lambda x, y: contracted(add(x, y), seed), [a, random((4,), seed, "bias")]) < 1e-6
    assert gradient_check(lambda x, y: contracted(mul(x, y), seed), [a, random((3, 4), seed, "c")]) < 1e-6
    assert gradient_check(lambda x: contracted(scale(transpose(x), 3.0), seed), [a]) < 1e-6
    assert gradient_check(lambda x: contracted(reshape(x, (2, 6)), seed), [a]) < 1e-6
    assert gradient_check(lambda x: contracted(concat([take(x, 2, 3), take(x, 0, 2)]), seed), [a]) < 1e-6
    assert gradient_check(lambda x: contracted(gelu(x), seed), [a]) < 1e-6
    assert gradient_check(lambda x: contracted(softmax_row(x), seed), [a]) < 1e-6
    assert gradient_check(lambda x: contracted(embedding(x, [2, 0, 2]), seed), [a]) < 1e-6

    gain, bias = 1.0 + 0.1 * random((4,), seed, "gain"), random((4,), seed, "beta")
    assert gradient_check(lambda x, g, b_: contracted(layer_norm(x, g, b_), seed), [a, gain, bias]) < 1e-6

    logits = random((5, 7), seed, "logits")
    targets = [1, 0, 6, 3, 3]
    mask = [True, False, True, True, False]
    assert gradient_check(lambda x: cross_entropy(x, targets, mask), [logits]) < 1e-6


@pytest.mark.parametrize("causal", [False, True])
def test_attention_gradients(causal):
    q, k, v = random((3, 4), 1, "q"), random((3, 4), 1, "k"), random((3, 4), 1, "v")
    assert gradient_check(lambda x, y, z: contracted(attention(x, y, z, 2, causal)), [q, k, v]) < 1e-6


def test_attention_is_causal():
    q, k, v = random((4, 4), 2, "q"), random((4, 4), 2, "k"), random((4, 4), 2, "v")
    before = attention(q, k, v, 2, causal=True).data
    k[3] += 5.0
    v[3] -= 5.0
    after = attention(q, k, v, 2, causal=True).data
    assert np.array_equal(before[:3], after[:3])
    assert not np.array_equal(before[3], after[3])

    with pytest.raises(DimensionError):
        attention(q, k, v, 3, causal=True)  # 3 heads don't divide 4


def test_backward():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True, name="x")
    with Tape() as tape:
        with pytest.raises(DimensionError):
            tape.backward(scale(x, 2))  # Not a scalar

        loss = total(mul(x, x))
        grads = tape.backward(loss)
        assert np.array_equal(grads["x"].data, 2 * x.data)
        with pytest.raises(PrealignError):
            total(x)  # Tape can't be reused after backward()

    # Constants are not differentiated
    with Tape() as tape:
        assert tape.backward(total(Tensor([1.0, 2.0]))) == {}

    # Gradients of a leaf used twice accumulate
    with Tape() as tape:
        grads = tape.backward(add(total(x), total(scale(x, 3))))
        assert np.array_equal(grads["x"].data, np.full((2, 2), 4.0))


def test_cross_entropy():
    assert math.isclose(cross_entropy(np.zeros((3, 10)), [1, 2, 3]).item(), math.log(10), rel_tol=1e-12)

    # Logits favoring the target by a gap of 2 yield log(1 + e^-2)
    loss = cross_entropy([[2.0, 0.0]], [0]).item()
    assert math.isclose(loss, math.log1p(math.exp(-2)), rel_tol=1e-9)

    with pytest.raises(UndefinedMeanError):
        cross_entropy(np.zeros((2, 4)), [0, 1], [False, False])

    with pytest.raises(DimensionError):
        cross_entropy(np.zeros((2, 4)), [0, 4])


def test_shapes():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))

    with pytest.raises(DimensionError):
        add(np.zeros((2, 3)), np.zeros(2))

    with pytest.raises(DimensionError):
        take(np.zeros((2, 3)), 1, 4, axis=1)

    with pytest.raises(DimensionError):
        embedding(np.zeros((4, 2)), [4])

    assert add(np.zeros((2, 3)), np.ones(3)).shape == [2, 3]
    assert str(Tensor(np.zeros((2, 3)), name="w")) == "Tensor w[2, 3]"


def test_op_counter():
    with OpCounter() as counter:
        matmul(np.ones((2, 3)), np.ones((3, 4)))
        attention(np.ones((2, 4)), np.ones((5, 4)), np.ones((5, 4)), 2, causal=False)
        gelu(np.ones(3))  # Elementwise ops are not counted

    assert counter.total == 2 * 2 * 3 * 4 + 2 * 2 * 5 * 4
    assert str(counter) == "128 flops"

    # Counting only happens within an OpCounter context
    matmul(np.ones((2, 3)), np.ones((3, 4)))
    assert counter.total == 128


def test_param_store():
    params = ParamStore()
    params.add("b.w", np.ones((2, 2)))
    params.add("a.w", np.zeros(3))
    assert params.names() == ["a.w", "b.w"]
    assert params.tally() == 7
    assert params.tally("b.") == 4
    assert str(params) == "2 params (7 scalars)"
    with pytest.raises(DimensionError):
        params.add("a.w", np.zeros(3))

    before = params.fingerprint()
    params.set_trainable("a.", False)
    assert params.trainable_names() == ["b.w"]
    assert params.fingerprint() == before  # Trainability is not part of the fingerprint

    b_before = params.fingerprint("b.")
    params.assign("a.w", [1.0, 2.0, 3.0])
    assert params.fingerprint() != before
    assert params.fingerprint("b.") == b_before
    with pytest.raises(DimensionError):
        params.assign("a.w", [1.0])


def test_rng():
    a = Rng(42, "init", "vit.pos").normal((3, 2))
    b = Rng(42, "init", "vit.pos").normal((3, 2))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, Rng(42, "init", "vit.patch.w").normal((3, 2)))
    assert not np.array_equal(a, Rng(43, "init", "vit.pos").normal((3, 2)))
    assert sorted(Rng(1, "shuffle").permutation(5)) == [0, 1, 2, 3, 4]
    assert str(Rng(1, "shuffle", "stage1", 0)) == "rng shuffle/stage1/0#1"


def test_gradient_check_catches_wrong_rule():
    def doubled(x):
        x = as_tensor(x)
        # Forward is 2x, the recorded rule forgets the factor 2
        return recorded(2.0 * x.data, "doubled", [x], lambda g: [g])

    a = random((3, 4))
    assert gradient_check(lambda x: contracted(doubled(x)), [a]) > 0.1
    assert gradient_check(lambda x: contracted(scale(x, 2.0)), [a]) < 1e-6


def test_softmax():
    x = random((4, 6), 3)
    y = softmax_row(x).data
    assert np.all(y > 0)
    assert np.allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(softmax_row(x + 7.5).data, y, rtol=0, atol=1e-12)
    assert np.allclose(softmax_row(x - 300.0).data, y, rtol=0, atol=1e-12)

    big = softmax_row([[1000.0, 0.0]]).data
    assert np.all(np.isfinite(big))
    assert big.tolist() == [[1.0, 0.0]]
    assert softmax_row([[0.0, 0.0, 0.0, 0.0]]).data.tolist() == [[0.25] * 4]


def test_matmul():
    x = random((3, 4), 4)
    assert np.array_equal(matmul(x, np.eye(4)).data, x)
    assert np.array_equal(matmul(np.eye(3), x).data, x)

    a, b = random((3, 5), 5, "a"), random((5, 2), 5, "b")
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]

    assert np.allclose(matmul(a, b).data, expected, rtol=0, atol=1e-12)
