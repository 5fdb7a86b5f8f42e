import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesm import autodiff as ad
from sesm.autodiff import Tensor
from sesm.losses import (
    LossWeights,
    diversity_loss,
    locality_loss,
    stability_loss,
    task_loss,
    total_loss,
)


# plain-python oracles ------------------------------------------------------------


def diversity_oracle(sel, d_min=2.0):
    total = 0.0
    for item in sel:
        for i, j in itertools.combinations(range(len(item)), 2):
            dist = sum((a - b) ** 2 for a, b in zip(item[i], item[j]))
            total += max(0.0, d_min - dist)
    return total / len(sel)


def stability_oracle(concepts):
    b, h = len(concepts), len(concepts[0])
    if b < 2:
        return 0.0
    total, terms = 0.0, 0
    for head in range(h):
        for i, j in itertools.combinations(range(b), 2):
            u, v = concepts[i][head], concepts[j][head]
            nu, nv = math.sqrt(sum(x * x for x in u)), math.sqrt(sum(x * x for x in v))
            cos = 0.0 if nu == 0 or nv == 0 else sum(x * y for x, y in zip(u, v)) / (nu * nv)
            total += 1 - cos
            terms += 1
    return total / terms


def locality_oracle(sel, lengths):
    return sum(sum(sum(row[:n]) / n for row in item) for item, n in zip(sel, lengths)) / len(sel)


# task loss -----------------------------------------------------------------------


def test_uniform_logits_give_log_c():
    for c in (2, 3, 7):
        loss = task_loss(Tensor(np.zeros((4, c))), [0, 1, 1, 0])
        assert float(loss.data) == pytest.approx(math.log(c), abs=1e-6)


def test_saturated_correct_logits_approach_zero():
    logits = np.full((3, 2), -50.0)
    logits[np.arange(3), [1, 0, 1]] = 50.0
    assert float(task_loss(Tensor(logits), [1, 0, 1]).data) < 1e-20


def test_class_weighted_uniform_is_ln2():
    loss = task_loss(Tensor(np.zeros((2, 2))), [0, 1], class_weights=[2.0, 1.0])
    assert float(loss.data) == pytest.approx((2 * math.log(2) + math.log(2)) / 3, abs=1e-6)


def test_class_weighted_uses_normalised_mean():
    logits = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    y = [0, 1, 1]
    w = np.array([3.0, 0.5])
    nll = -np.log(np.exp(logits) / np.exp(logits).sum(1, keepdims=True))[np.arange(3), y]
    expect = (w[y] * nll).sum() / w[y].sum()
    assert float(task_loss(Tensor(logits), y, w).data) == pytest.approx(expect, abs=1e-12)


def test_task_loss_label_errors():
    with pytest.raises(ValueError):
        task_loss(Tensor(np.zeros((2, 2))), [0, 2])
    with pytest.raises(ValueError):
        task_loss(Tensor(np.zeros((2, 2))), [0])


# diversity -------------------------------------------------------------------------


def test_diversity_identical_pair_is_two():
    s = np.array([[1.0, 0, 1, 1], [1.0, 0, 1, 1]])
    assert float(diversity_loss(s).data) == 2.0


def test_diversity_threshold_boundary_is_zero():
    s = np.array([[1.0, 1, 0, 0], [0.0, 0, 0, 0]])
    assert float(diversity_loss(s).data) == 0.0


def test_diversity_three_identical_rows_is_six():
    s = np.ones((3, 5))
    assert float(diversity_loss(s).data) == 6.0


def test_diversity_single_head_is_zero():
    assert float(diversity_loss(np.ones((2, 1, 4))).data) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 6), st.integers(0, 2**31 - 1), st.booleans())
def test_diversity_matches_oracle(b, h, n, seed, hard):
    rng = np.random.default_rng(seed)
    s = rng.random((b, h, n))
    if hard:
        s = (s > 0.5).astype(float)
    got = float(diversity_loss(Tensor(s)).data)
    assert got == pytest.approx(diversity_oracle(s.tolist()), abs=1e-9)
    assert got >= 0


# stability -------------------------------------------------------------------------


def test_stability_identical_concepts_zero():
    c = np.tile(np.array([1.0, -2.0, 0.5]), (3, 2, 1))
    assert float(stability_loss(c).data) == pytest.approx(0.0, abs=1e-12)


def test_stability_antipodal_pair_is_two():
    c = np.array([[[1.0, 2.0]], [[-1.0, -2.0]]])
    assert float(stability_loss(c).data) == pytest.approx(2.0, abs=1e-12)


def test_stability_zero_vector_counts_as_distance_one():
    c = np.array([[[0.0, 0.0]], [[1.0, 0.0]]])
    assert float(stability_loss(c).data) == 1.0


def test_stability_single_item_is_zero():
    assert float(stability_loss(np.ones((1, 3, 2))).data) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_stability_matches_oracle(b, h, d, seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(b, h, d))
    c[rng.random((b, h)) < 0.2] = 0.0
    got = float(stability_loss(Tensor(c)).data)
    assert got == pytest.approx(stability_oracle(c.tolist()), abs=1e-9)
    assert -1e-12 <= got <= 2 + 1e-12


# locality --------------------------------------------------------------------------


def test_locality_examples():
    mask = np.ones((1, 4))
    assert float(locality_loss(np.ones((1, 3, 4)), mask).data) == 3.0
    assert float(locality_loss(np.zeros((1, 3, 4)), mask).data) == 0.0
    half = np.array([[[1.0, 1, 0, 0], [0, 0, 0, 0]]])
    assert float(locality_loss(half, mask).data) == 0.5


def test_locality_uses_unpadded_length():
    sel = np.array([[[1.0, 1.0, 0.0, 0.0]]])
    mask = np.array([[1.0, 1.0, 0.0, 0.0]])
    assert float(locality_loss(sel, mask).data) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_locality_matches_oracle(b, h, n, seed):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, n + 1, size=b)
    mask = (np.arange(n)[None] < lengths[:, None]).astype(float)
    s = rng.random((b, h, n)) * mask[:, None]
    got = float(locality_loss(Tensor(s), mask).data)
    assert got == pytest.approx(locality_oracle(s.tolist(), lengths.tolist()), abs=1e-9)
    assert 0 <= got <= h


# total -----------------------------------------------------------------------------


def _parts(seed=0):
    rng = np.random.default_rng(seed)
    return {
        "task": Tensor(np.array(rng.random(), dtype=np.float32)),
        "diversity": Tensor(np.array(rng.random() * 3, dtype=np.float32)),
        "stability": Tensor(np.array(rng.random(), dtype=np.float32)),
        "locality": Tensor(np.array(rng.random() * 2, dtype=np.float32)),
    }


def test_total_with_zero_lambdas_is_task():
    p = _parts()
    total, br = total_loss(p, LossWeights(0, 0, 0))
    assert br["total"] == br["task"] == float(p["task"].data)


def test_total_adds_two_for_identical_pair():
    task = Tensor(np.array(0.7))
    div = diversity_loss(np.array([[1.0, 0, 1], [1.0, 0, 1]]))
    total, _ = total_loss({"task": task, "diversity": div}, LossWeights(1.0, 0, 0))
    assert float(total.data) == pytest.approx(2.7, abs=1e-12)


def test_doubling_lambdas_doubles_regulariser_part():
    p = _parts(3)
    t1, b1 = total_loss(p, LossWeights(0.1, 0.2, 0.3))
    t2, _ = total_loss(p, LossWeights(0.2, 0.4, 0.6))
    assert float(t2.data) - b1["task"] == pytest.approx(2 * (float(t1.data) - b1["task"]), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 5), st.floats(0, 5), st.floats(0, 5))
def test_breakdown_resums_exactly(seed, ld, ls, ll):
    p = _parts(seed)
    total, br = total_loss(p, LossWeights(ld, ls, ll))
    resum = br["task"] + ld * br["diversity"] + ls * br["stability"] + ll * br["locality"]
    assert abs(resum - br["total"]) <= 1e-9
    assert br["total"] == float(total.data)


def test_loss_weights_validation():
    assert LossWeights(-1, 0, 0, d_min=0).validate() == ["lambda_diversity must be >= 0", "d_min must be > 0"]
    assert LossWeights(class_weights=(1.0, 0.0)).validate()


# gradients along the soft path -----------------------------------------------------


def test_regulariser_gradients():
    rng = np.random.default_rng(0)
    s = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 5)))
    mask = np.ones((2, 5))
    mask[1, 4] = 0
    c = Tensor(rng.normal(size=(4, 3, 2)))
    # d_min large enough that every hinge is active
    assert ad.grad_check(lambda x: diversity_loss(x, d_min=10.0), s) < 1e-4
    assert ad.grad_check(lambda x: locality_loss(x, mask), s) < 1e-4
    assert ad.grad_check(stability_loss, c) < 1e-4
