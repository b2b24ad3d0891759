import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from votetok import nn
from votetok.quantizer import (
    BranchBank,
    QuantizerConfig,
    aggregate_infer,
    aggregate_train,
    binarize,
    code_to_token,
    project,
    quantize_frame_infer,
    quantize_frame_train,
    token_to_code,
)


def test_config_validation():
    assert QuantizerConfig(code_dim=13).codebook_size == 8192
    for bad in ({"n_branches": 4}, {"n_branches": 0}, {"code_dim": 0}, {"code_dim": 31}):
        with pytest.raises(ValueError):
            QuantizerConfig(**bad)


def test_project_shapes_and_values():
    W = np.array([[[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, -1.0]], [[0.0, 1.0], [1.0, 0.0]]])
    bank = BranchBank(W, np.array([[0.0, 1.0], [0.0, 0.0], [-1.0, 0.0]]))
    p = project(np.array([3.0, -2.0]), bank)
    assert p.value.tolist() == [[3.0, -1.0], [6.0, 2.0], [-3.0, 3.0]]
    with pytest.raises(ValueError):
        project(np.zeros(3), bank)


def test_binarize_sign_zero_is_positive():
    assert binarize(np.array([0.7, -0.1, 0.0])).value.tolist() == [1.0, -1.0, 1.0]


def test_aggregate_train_example():
    s = aggregate_train([[1, -1, 1], [1, 1, -1], [-1, -1, 1]])
    assert np.allclose(s.value, [1 / 3, -1 / 3, 1 / 3])


def test_aggregate_train_shape_mismatch():
    with pytest.raises(ValueError):
        aggregate_train([np.ones(3), np.ones(4)])


def test_aggregate_infer_example():
    assert aggregate_infer([[1, -1, 1], [1, 1, -1], [-1, -1, 1]]).tolist() == [1, -1, 1]


def test_aggregate_infer_rejects_even_count():
    with pytest.raises(ValueError):
        aggregate_infer(np.ones((4, 3)))


def test_code_to_token_examples():
    assert code_to_token([1, 1, 1]) == 7
    assert code_to_token([-1, -1, -1]) == 0
    assert code_to_token([1, -1, -1]) == 1  # bit 0 is the least significant
    with pytest.raises(ValueError):
        code_to_token([1, 0, -1])
    with pytest.raises(ValueError):
        token_to_code(8, 3)


def test_infer_is_sign_of_train_score():
    # the vote equals sign of the consensus score used in training
    rng = np.random.default_rng(0)
    bank = BranchBank.init(QuantizerConfig(5, 6, 10), rng)
    h = rng.normal(size=(40, 10))
    s = quantize_frame_train(h, bank).score.value
    assert np.array_equal(quantize_frame_infer(h, bank), code_to_token(np.where(s >= 0, 1, -1)))


@pytest.mark.parametrize("n", [1, 3, 5, 7])
def test_majority_exhaustive_small(n):
    d = 8 if n <= 3 else (4 if n == 5 else 3)
    # per-bit vote on every +/-1 pattern of n voters (bits are independent, so
    # enumerate one bit fully and tile across d)
    for votes in itertools.product([-1, 1], repeat=n):
        col = np.array(votes)
        expect = 1 if (col == 1).sum() > n // 2 else -1
        codes = np.tile(col[:, None], (1, d))
        assert np.all(aggregate_infer(codes) == expect)


def test_majority_exhaustive_joint_n3_d3():
    for flat in itertools.product([-1, 1], repeat=9):
        codes = np.array(flat).reshape(3, 3)
        voted = aggregate_infer(codes)
        for j in range(3):
            assert voted[j] == (1 if (codes[:, j] == 1).sum() >= 2 else -1)


@settings(max_examples=200, deadline=None)
@given(d=st.integers(1, 13), n=st.sampled_from([3, 5, 7]), data=st.data())
def test_error_correction_property(d, n, data):
    # if every bit is wrong in fewer than n/2 voters, the vote recovers the reference
    ref = np.array(data.draw(st.lists(st.sampled_from([-1, 1]), min_size=d, max_size=d)))
    codes = np.tile(ref, (n, 1))
    for j in range(d):
        k = data.draw(st.integers(0, n // 2))
        who = data.draw(st.permutations(range(n)))[:k]
        codes[list(who), j] *= -1
    assert np.array_equal(aggregate_infer(codes), ref)


def test_correction_even_when_every_voter_is_wrong():
    # each voter has one distinct wrong bit: all tokens wrong, vote still right
    ref = np.ones(5, dtype=int)
    codes = np.tile(ref, (5, 1)) - 2 * np.eye(5, dtype=int)
    assert all(code_to_token(c) != code_to_token(ref) for c in codes)
    assert code_to_token(aggregate_infer(codes)) == code_to_token(ref)


@pytest.mark.parametrize("d", range(1, 11))
def test_token_mapping_bijective_exhaustive(d):
    ks = np.arange(2**d)
    codes = token_to_code(ks, d)
    assert len({tuple(c) for c in codes}) == 2**d
    assert np.array_equal(code_to_token(codes), ks)


@settings(max_examples=300)
@given(d=st.integers(11, 13), data=st.data())
def test_token_mapping_round_trip_random(d, data):
    k = data.draw(st.integers(0, 2**d - 1))
    assert code_to_token(token_to_code(k, d)) == k


@pytest.mark.parametrize("token", [3485, 3517, 3357, 5517, 5533, 2920, 2912, 6939, 6943, 7003])
def test_case_tokens_match_python_binary(token):
    code = token_to_code(token, 13)
    assert "".join("1" if b > 0 else "0" for b in code[::-1]) == format(token, "013b")


def test_case_token_pairs_differ_in_one_bit():
    for a, b, bit in [(3485, 3517, 5), (5517, 5533, 4), (2920, 2912, 3), (6939, 6943, 2), (6939, 7003, 6), (3485, 3357, 7)]:
        diff = np.flatnonzero(token_to_code(a, 13) != token_to_code(b, 13))
        assert diff.tolist() == [bit]


def test_bank_init_branches_differ_and_params():
    bank = BranchBank.init(QuantizerConfig(3, 4, 8), np.random.default_rng(0))
    assert bank.n_params() == 3 * (4 * 8 + 4)
    assert not np.allclose(bank.W.value[0], bank.W.value[1])
    assert np.all(np.abs(bank.W.value) <= 1 / np.sqrt(8))
    assert set(bank.params()) == {"quantizer.W", "quantizer.b"}


def test_train_path_gradients_reach_all_branches():
    rng = np.random.default_rng(1)
    bank = BranchBank.init(QuantizerConfig(3, 4, 6), rng)
    out = quantize_frame_train(rng.normal(size=(5, 6)), bank)
    nn.sum_(nn.mul(out.score, rng.normal(size=(5, 4)))).backward()
    assert all(np.any(bank.W.grad[i] != 0) for i in range(3))
