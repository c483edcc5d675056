#!/usr/bin/env python3
"""
Tests for the autodiff tensor core.

Run:
    python test_tensor_core.py
"""
import math
import sys
import threading

import numpy as np

from mvssl.errors import BatchTooSmallError, DimensionError, NumericError, RankError, TapeError
from mvssl.tensor_core import (
    Tape,
    Tensor,
    backward,
    column_standardize,
    cosine_sim,
    finite_difference_check,
    log_softmax,
    matmul,
    no_tape,
    softmax,
)
from utils.script_runner import run_tests


def test_matmul_identity_and_annihilation():
    a = matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(a.data, [[1.0, 2.0], [3.0, 4.0]])
    b = matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0], [5.0]]))
    assert np.array_equal(b.data, [[0.0], [0.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    try:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    except DimensionError as e:
        assert "(2, 3)" in str(e) and "(4, 5)" in str(e)
    else:
        raise AssertionError("expected DimensionError")


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor.parameter(rng.uniform(-2, 2, (3, 3)), "a")
    b = Tensor(rng.uniform(-2, 2, (3, 3)))
    assert finite_difference_check(lambda: (a @ b).sum(), [a]) < 1e-6


def test_sum_and_square_norm_gradients():
    w = Tensor.parameter([1.0, -2.0, 3.0], "w")
    with Tape():
        grads = backward(w.sum())
    assert np.array_equal(grads["w"], np.ones(3))

    w.zero_grad()
    with Tape():
        backward((w * w).sum())
    assert np.allclose(w.grad, 2.0 * w.data)


def test_oracle_on_quadratic():
    theta = Tensor.parameter([1.0, 2.0], "theta")
    assert finite_difference_check(lambda: (theta * theta).sum(), [theta]) < 1e-8
    theta.zero_grad()
    with Tape():
        backward((theta * theta).sum())
    assert np.allclose(theta.grad, [2.0, 4.0])


def test_oracle_on_softmax_cross_entropy():
    logits = Tensor.parameter([0.3, -1.2, 2.0], "logits")
    assert finite_difference_check(lambda: -log_softmax(logits)[1], [logits]) < 1e-6


def test_oracle_rejects_non_finite_objective():
    w = Tensor.parameter([1.0], "w")
    try:
        finite_difference_check(lambda: w * float("inf"), [w])
    except NumericError:
        pass
    else:
        raise AssertionError("expected NumericError")


def test_primitives_match_finite_differences():
    rng = np.random.default_rng(1)
    x = Tensor.parameter(rng.uniform(-2, 2, (5, 3)), "x")
    y = Tensor(rng.uniform(-2, 2, (5, 3)))

    def composite():
        z = column_standardize(x)
        s = softmax(x, axis=1)
        return (z * y).sum() + (s * y).sum() + (x.tanh() * x.exp()).mean() + (x * x + 1.0).log().sum()

    assert finite_difference_check(composite, [x]) < 1e-5


def test_second_backward_on_consumed_tape_is_rejected():
    w = Tensor.parameter([1.0, 2.0], "w")
    with Tape():
        loss = (w * w).sum()
        backward(loss)
        try:
            backward(loss)
        except TapeError:
            pass
        else:
            raise AssertionError("expected TapeError")


def test_backward_needs_scalar_on_a_tape():
    w = Tensor.parameter([1.0, 2.0], "w")
    with Tape():
        try:
            backward(w * 2.0)
        except RankError:
            pass
        else:
            raise AssertionError("expected RankError")
    try:
        backward((w * w).sum())
    except TapeError:
        pass
    else:
        raise AssertionError("expected TapeError outside a tape")


def test_tape_records_in_topological_order():
    w = Tensor.parameter([[1.0, 2.0]], "w")
    with Tape() as tape:
        (w * 2.0).tanh().sum()
        with no_tape():
            (w * 3.0).sum()
    assert tape.ops() == ["mul", "tanh", "sum"]


def test_tape_is_confined_to_its_thread():
    w = Tensor.parameter([1.0], "w")
    errors = []
    with Tape() as tape:
        def _worker():
            try:
                tape.record("add", (w,), lambda g: (g,), (1,))
            except TapeError as e:
                errors.append(e)

        thread = threading.Thread(target=_worker)
        thread.start()
        thread.join()
    assert len(errors) == 1


def test_replayed_tape_gives_bit_identical_gradients():
    rng = np.random.default_rng(2)
    w = Tensor.parameter(rng.normal(size=(4, 3)), "w")
    x = Tensor(rng.normal(size=(6, 4)))
    results = []
    for _ in range(2):
        w.zero_grad()
        with Tape():
            backward(column_standardize(x @ w).tanh().sum())
        results.append(w.grad.copy())
    assert np.array_equal(results[0], results[1])


def test_column_standardize_examples():
    out = column_standardize(Tensor([[1.0], [-1.0]]))
    assert np.array_equal(out.data, [[1.0], [-1.0]])

    constant = column_standardize(Tensor([[2.0, 1.0], [2.0, 5.0], [2.0, 0.0]]))
    assert np.array_equal(constant.data[:, 0], [0.0, 0.0, 0.0])

    z = np.random.default_rng(3).normal(size=(8, 4))
    s = column_standardize(Tensor(z)).data
    assert np.abs(s.mean(axis=0)).max() < 1e-12
    assert np.abs(s.std(axis=0) - 1.0).max() < 1e-9
    twice = column_standardize(Tensor(s)).data
    assert np.abs(twice - s).max() < 1e-9


def test_column_standardize_constant_column_passes_no_gradient():
    z = Tensor.parameter([[2.0, 1.0], [2.0, 5.0], [2.0, 0.0]], "z")
    with Tape():
        backward((column_standardize(z) * Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])).sum())
    assert np.array_equal(z.grad[:, 0], [0.0, 0.0, 0.0])


def test_column_standardize_needs_two_rows():
    try:
        column_standardize(Tensor([[1.0, 2.0]]))
    except BatchTooSmallError:
        pass
    else:
        raise AssertionError("expected BatchTooSmallError")


def test_softmax_examples():
    assert np.allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    stress = softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(stress)) and abs(stress[0] - 1.0) < 1e-12 and stress[1] < 1e-300
    logs = softmax(Tensor([math.log(1), math.log(2), math.log(3)])).data
    assert np.allclose(logs, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    rows = softmax(Tensor(np.random.default_rng(4).uniform(-50, 50, (6, 5))), axis=1).data
    assert np.abs(rows.sum(axis=1) - 1.0).max() < 1e-12 and (rows >= 0).all()


def test_softmax_rejects_nan():
    try:
        softmax(Tensor([0.0, float("nan")]))
    except NumericError:
        pass
    else:
        raise AssertionError("expected NumericError")


def test_cosine_sim_examples():
    a = Tensor([0.3, -1.2, 2.0])
    assert abs(cosine_sim(a, a).item() - 1.0) < 1e-12
    assert cosine_sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert abs(cosine_sim(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() - 1 / math.sqrt(2)) < 1e-12
    assert cosine_sim(Tensor([0.0, 0.0]), Tensor([1.0, 2.0])).item() == 0.0


if __name__ == "__main__":
    sys.exit(run_tests(globals()))
