import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import naive_ece
from patchwork.confidence import (ConfidenceMethod, DEFAULT_METHOD, confidence, confidence_batch, ece,
                                  ece_from_rows, reliability_bins, write_reliability_csv)
from patchwork.errors import ConfigError, NumericError

METHODS = ["top", "margin", "neg-entropy"]


def test_default_is_neg_entropy():
    assert DEFAULT_METHOD is ConfidenceMethod.NEG_ENTROPY


@pytest.mark.parametrize("c", [2, 3, 10])
def test_uniform_logits(c):
    z = np.zeros(c)
    assert confidence(z, "top") == pytest.approx(1 / c)
    assert confidence(z, "margin") == pytest.approx(0.0, abs=1e-12)
    assert confidence(z, "neg-entropy") == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("m", METHODS)
def test_saturated_logits(m):
    assert confidence(np.array([1000.0, 0.0]), m) == pytest.approx(1.0, abs=1e-6)


def test_two_class_hand_values():
    logits = np.log(np.array([0.9, 0.1]))
    h = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))
    assert confidence(logits, "top") == pytest.approx(0.9, abs=1e-12)
    assert confidence(logits, "margin") == pytest.approx(0.8, abs=1e-12)
    assert confidence(logits, "neg-entropy") == pytest.approx(1 - h / math.log(2), abs=1e-12)
    assert confidence(logits, "neg-entropy") == pytest.approx(0.5310, abs=1e-4)


def test_errors():
    with pytest.raises(ConfigError):
        confidence_batch(np.zeros((3, 1)))
    with pytest.raises(NumericError):
        confidence_batch(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        ConfidenceMethod.parse("entropy-ish")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.floats(-50, 50), st.sampled_from(METHODS))
def test_shift_invariance_and_range(logits, shift, m):
    a = np.array(logits)
    c0, c1 = confidence(a, m), confidence(a + shift, m)
    assert c0 == pytest.approx(c1, abs=1e-6)
    assert 0.0 <= c0 <= 1.0


def test_ece_hand_example():
    conf = [0.8, 0.8, 0.8, 0.6]
    correct = [1, 1, 0, 1]
    # two equal-width bins would put 0.6 and 0.8 together; four bins give the intended split
    r = ece(conf, correct, n_bins=4)
    assert r.ece == pytest.approx(0.75 * abs(0.8 - 2 / 3) + 0.25 * abs(0.6 - 1.0), abs=1e-12)
    assert r.ece == pytest.approx(0.2, abs=1e-12)


def test_ece_perfect_stream():
    assert ece(np.ones(50), np.ones(50, bool), 100).ece == 0.0


@pytest.mark.parametrize("n_bins", [1, 10, 100, 7])
def test_ece_matches_rebinning_oracle(n_bins):
    rng = np.random.default_rng(n_bins)
    conf = rng.random(2000)
    conf[:20] = np.arange(20) / 20  # exact bin edges
    correct = rng.random(2000) < conf
    assert ece(conf, correct, n_bins).ece == pytest.approx(naive_ece(conf, correct, n_bins), abs=1e-12)


def test_single_bin_recovers_totals():
    rng = np.random.default_rng(1)
    conf = rng.random(300)
    correct = rng.random(300) < 0.4
    r = ece(conf, correct, 1)
    assert r.mean_confidence[0] == pytest.approx(conf.mean())
    assert r.mean_accuracy[0] == pytest.approx(correct.mean())
    assert r.ece == pytest.approx(abs(conf.mean() - correct.mean()))


def test_bins_partition():
    rng = np.random.default_rng(2)
    r = ece(rng.random(999), rng.random(999) < 0.5, 13)
    assert r.counts.sum() == 999


def test_calibrated_stream_monte_carlo():
    rng = np.random.default_rng(3)
    conf = rng.random(100_000)
    correct = rng.random(100_000) < conf
    r = ece(conf, correct, 10)
    nz = r.counts > 0
    assert np.max(np.abs(r.mean_confidence[nz] - r.mean_accuracy[nz])) < 0.02


def test_ece_errors():
    with pytest.raises(ConfigError):
        ece([], [])
    with pytest.raises(ConfigError):
        ece([0.5, 1.2], [1, 0])
    with pytest.raises(ConfigError):
        ece([0.5], [1, 0])


def test_reliability_csv_recomposes(tmp_path):
    rng = np.random.default_rng(4)
    conf = rng.random(500)
    r = ece(conf, rng.random(500) < conf, 100)
    path = tmp_path / "bins.csv"
    write_reliability_csv(path, r)
    with open(path) as fh:
        rows = list(csv.reader(fh))[1:]
    assert len(rows) <= 100
    assert ece_from_rows(rows) == pytest.approx(r.ece, abs=1e-12)
    assert len(reliability_bins(conf, rng.random(500) < 0.5, 100)) == len(rows)
