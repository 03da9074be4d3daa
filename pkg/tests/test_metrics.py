import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dadmls import numerics as nx
from dadmls.domains import LabeledDataset
from dadmls.metrics import MmdConfig, accuracy, median_bandwidth, mmd_permutation_test, predict, rbf_mmd2
from dadmls.numerics import Rng


def _identity(x):
    return x


class _LogitTable:
    """Classifier returning fixed logits for each input row index stored in column 0."""

    def __init__(self, logits):
        self.logits = np.asarray(logits, dtype=np.float64)

    def __call__(self, x):
        return nx.Tensor(self.logits[x.data[:, 0].astype(int)])


def _indexed(labels):
    labels = np.asarray(labels)
    return LabeledDataset(np.arange(len(labels), dtype=float)[:, None], labels, "d")


# --- accuracy -------------------------------------------------------------------------


def test_oracle_classifier_is_perfect():
    labels = np.array([0, 2, 1, 1, 0, 2])
    assert accuracy(_LogitTable(np.eye(3)[labels] * 5.0), _identity, _indexed(labels)) == 1.0


def test_zero_logits_tie_break_to_class_zero():
    labels = np.array([0, 1] * 10)
    c = _LogitTable(np.zeros((20, 2)))
    assert accuracy(c, _identity, _indexed(labels)) == 0.5
    assert np.all(predict(c, _identity, np.arange(20.0)[:, None]) == 0)


def test_accuracy_rejects_empty():
    class Empty:
        points = np.zeros((0, 2))
        labels = np.zeros(0, dtype=int)

    with pytest.raises(ValueError):
        accuracy(_LogitTable(np.zeros((1, 2))), _identity, Empty())


@settings(max_examples=40)
@given(hnp.arrays(np.int64, (12, 4), elements=st.integers(-5, 5)), st.integers(-100, 100),
       st.sampled_from([0.25, 0.5, 2.0, 8.0]), st.integers(0, 3))
def test_accuracy_invariant_under_monotone_logit_maps(logits, shift, gain, seed):
    # integer grid keeps every transform exact, so ties survive unchanged
    logits = logits.astype(np.float64)
    labels = Rng(seed).integers(0, 4, size=12)
    d = _indexed(labels)
    base = accuracy(_LogitTable(logits), _identity, d)
    assert accuracy(_LogitTable(logits + shift), _identity, d) == base
    assert accuracy(_LogitTable(gain * logits), _identity, d) == base
    assert accuracy(_LogitTable(np.exp(logits)), _identity, d) == base


# --- mmd ----------------------------------------------------------------------------------


def _naive_mmd2(x, y, h):
    def k(a, b):
        return np.exp(-np.sum((a - b) ** 2) / (2 * h * h))

    kxx = sum(k(a, b) for a in x for b in x) / len(x) ** 2
    kyy = sum(k(a, b) for a in y for b in y) / len(y) ** 2
    kxy = sum(k(a, b) for a in x for b in y) / (len(x) * len(y))
    return kxx + kyy - 2 * kxy


def test_identical_sets_have_zero_distance():
    x = Rng(0).normal((40, 3))
    assert rbf_mmd2(x, x.copy()) == pytest.approx(0.0, abs=1e-12)


def test_separated_clusters_lose_the_cross_term():
    rng = Rng(1)
    x = rng.normal((30, 2)) * 0.1
    y = rng.normal((30, 2)) * 0.1 + 100.0
    h = 0.5
    gx = np.exp(-((x[:, None] - x[None]) ** 2).sum(-1) / (2 * h * h)).mean()
    gy = np.exp(-((y[:, None] - y[None]) ** 2).sum(-1) / (2 * h * h)).mean()
    assert rbf_mmd2(x, y, MmdConfig(h)) == pytest.approx(gx + gy, abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(2, 12), st.integers(1, 3), st.integers(0, 1000))
def test_mmd_matches_double_loop(n, m, d, seed):
    rng = Rng(seed)
    x, y = rng.normal((n, d)), rng.normal((m, d)) + 0.5
    h = median_bandwidth(x, y)
    assert rbf_mmd2(x, y) == pytest.approx(_naive_mmd2(x, y, h), abs=1e-10)
    assert rbf_mmd2(x, y, MmdConfig(0.7)) == pytest.approx(_naive_mmd2(x, y, 0.7), abs=1e-10)


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_mmd_symmetric_and_non_negative(seed):
    rng = Rng(seed)
    x, y = rng.normal((9, 2)), rng.normal((7, 2))
    assert rbf_mmd2(x, y) == rbf_mmd2(y, x)
    assert rbf_mmd2(x, y) >= 0.0


def test_mmd_needs_two_samples_per_side():
    with pytest.raises(ValueError):
        rbf_mmd2(np.zeros((1, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError):
        rbf_mmd2(np.zeros((5, 2)), np.zeros((1, 2)))


@pytest.mark.parametrize("h", [0.0, -1.0])
def test_explicit_bandwidth_must_be_positive(h):
    with pytest.raises(ValueError):
        MmdConfig(h)


def test_median_bandwidth_matches_definition():
    x = np.array([[0.0], [1.0]])
    y = np.array([[3.0]])
    # pairwise distances 1, 3, 2
    assert median_bandwidth(x, y) == 2.0


def test_permutation_test_separates_shifted_samples():
    rng = Rng(3)
    same = mmd_permutation_test(rng.normal((80, 2)), rng.normal((80, 2)), n_perm=100, rng=Rng(4))
    far = mmd_permutation_test(rng.normal((80, 2)), rng.normal((80, 2)) + 1.0, n_perm=100, rng=Rng(4))
    assert same > 0.01 and far < 0.02
