import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_abs_error
from pase.diffcore import Graph, ParamSet, finite_diff_check
from pase.prototypes import PrototypeBank, PrototypeError, class_means, intra_loss


def bank_with(protos, gamma=0.98, tau=0.07):
    protos = np.asarray(protos, dtype=np.float64)
    b = PrototypeBank(protos.shape[0], {"t": protos.shape[1]}, gamma, tau)
    b.protos["t"] = protos.copy()
    b.initialized["t"][:] = True
    return b


def intra_value(bank, h, labels, similarity="cosine"):
    g = Graph()
    return g.scalar(intra_loss(g, bank, "t", g.leaf(h), labels, similarity))


def intra_oracle(protos, h, labels, tau):
    """Straight-line per-sample loop."""
    total = 0.0
    for hi, yi in zip(h, labels):
        sims = [
            float(hi @ c) / (math.sqrt(float(hi @ hi)) * math.sqrt(float(c @ c))) / tau for c in protos
        ]
        top = max(sims)
        lse = top + math.log(sum(math.exp(s - top) for s in sims))
        total += -(sims[yi] - lse)
    return total / len(labels)


class TestInit:
    def test_singleton(self):
        b = PrototypeBank(2, {"t": 3})
        x = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]])
        b.init_from({"t": x}, np.array([1, 0]))
        np.testing.assert_array_equal(b.protos["t"], x[[1, 0]])
        assert b.ready("t")

    def test_symmetric_pair_gives_zero(self):
        b = PrototypeBank(2, {"t": 2})
        x = np.array([[1.5, -2.0], [-1.5, 2.0]])
        b.init_from({"t": x}, np.array([0, 0]))
        np.testing.assert_array_equal(b.protos["t"][0], [0.0, 0.0])
        assert b.initialized["t"].tolist() == [True, False]
        assert not b.ready("t")

    def test_batch_means_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(8, 4))
        y = np.array([0, 1, 2, 0, 1, 2, 0, 0])
        b = PrototypeBank(3, {"t": 4})
        b.init_from({"t": x}, y)
        for k in range(3):
            rows = [x[i] for i in range(8) if y[i] == k]
            np.testing.assert_allclose(b.protos["t"][k], sum(rows) / len(rows), atol=1e-15)


class TestEma:
    def test_gamma_one_unchanged(self):
        b = bank_with([[1.0, 2.0], [3.0, 4.0]], gamma=1.0)
        b.ema_update({"t": np.array([[9.0, 9.0], [7.0, 7.0]])}, np.array([0, 1]))
        np.testing.assert_array_equal(b.protos["t"], [[1.0, 2.0], [3.0, 4.0]])

    def test_gamma_zero_batch_means(self):
        b = bank_with([[1.0, 2.0], [3.0, 4.0]], gamma=0.0)
        b.ema_update({"t": np.array([[9.0, 9.0], [7.0, 5.0], [5.0, 5.0]])}, np.array([0, 1, 1]))
        np.testing.assert_array_equal(b.protos["t"], [[9.0, 9.0], [6.0, 5.0]])

    def test_default_gamma_example(self):
        b = bank_with([[1.0, 0.0], [5.0, 5.0]], gamma=0.98)
        b.ema_update({"t": np.array([[0.0, 1.0]])}, np.array([0]))
        np.testing.assert_allclose(b.protos["t"][0], [0.98, 0.02], atol=1e-15)
        np.testing.assert_array_equal(b.protos["t"][1], [5.0, 5.0])

    def test_first_sight_initialises(self):
        b = PrototypeBank(2, {"t": 1}, gamma=0.98)
        b.ema_update({"t": np.array([[4.0]])}, np.array([1]))
        assert b.protos["t"][1, 0] == 4.0

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), gamma=st.floats(0.0, 1.0))
    def test_contraction_toward_batch_mean(self, seed, gamma):
        rng = np.random.default_rng(seed)
        old = rng.normal(size=(3, 4))
        b = bank_with(old, gamma=gamma)
        x = rng.normal(size=(9, 4))
        y = rng.integers(0, 3, 9)
        means, present = class_means(x, y, 3)
        b.ema_update({"t": x}, y)
        for k in np.flatnonzero(present):
            lhs = np.linalg.norm(b.protos["t"][k] - means[k])
            rhs = gamma * np.linalg.norm(old[k] - means[k])
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)
        for k in np.flatnonzero(~present):
            np.testing.assert_array_equal(b.protos["t"][k], old[k])


class TestIntraLoss:
    def test_orthogonal_example(self):
        b = bank_with(np.eye(3), tau=1.0)
        loss = intra_value(b, np.eye(3), np.arange(3))
        assert loss == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
        assert loss == pytest.approx(0.5514447, abs=1e-7)

    def test_identical_prototypes_give_log_k(self):
        rng = np.random.default_rng(1)
        b = bank_with(np.tile(rng.normal(size=(1, 5)), (4, 1)))
        h = rng.normal(size=(6, 5))
        assert intra_value(b, h, rng.integers(0, 4, 6)) == pytest.approx(math.log(4), abs=1e-12)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(2)
        protos = rng.normal(size=(4, 6))
        h = rng.normal(size=(10, 6))
        y = rng.integers(0, 4, 10)
        b = bank_with(protos, tau=0.07)
        assert intra_value(b, h, y) == pytest.approx(intra_oracle(protos, h, y, 0.07), abs=1e-10)

    def test_dot_similarity(self):
        protos = np.array([[1.0, 0.0], [0.0, 2.0]])
        h = np.array([[3.0, 1.0]])
        b = bank_with(protos, tau=0.5)
        logits = h @ protos.T / 0.5
        expected = -(logits[0, 1] - np.log(np.exp(logits).sum()))
        assert intra_value(b, h, np.array([1]), "dot") == pytest.approx(expected, abs=1e-12)

    def test_uninitialised_prototype_names_modality_and_class(self):
        b = PrototypeBank(3, {"t": 2})
        b.init_from({"t": np.ones((2, 2))}, np.array([0, 2]))
        with pytest.raises(PrototypeError, match=r"\(t, 1\)"):
            intra_value(b, np.ones((1, 2)), np.array([0]))

    def test_prototypes_receive_no_gradient(self):
        b = bank_with(np.eye(3))
        g = Graph()
        h = g.leaf(np.random.default_rng(0).normal(size=(4, 3)))
        loss = intra_loss(g, b, "t", h, np.array([0, 1, 2, 0]))
        g.backward(loss)
        assert np.abs(g.grad(h)).sum() > 0
        # the only leaves besides h are constants built inside intra_loss
        assert b.protos["t"].tobytes() == np.eye(3).tobytes()

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10**6), tau=st.floats(0.01, 5.0))
    def test_nonnegative(self, seed, tau):
        rng = np.random.default_rng(seed)
        b = bank_with(rng.normal(size=(3, 4)), tau=tau)
        assert intra_value(b, rng.normal(size=(5, 4)), rng.integers(0, 3, 5)) >= 0.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        b = bank_with(rng.normal(size=(3, 5)))
        h = rng.normal(size=(7, 5))
        y = rng.integers(0, 3, 7)
        perm = rng.permutation(7)
        assert intra_value(b, h[perm], y[perm]) == pytest.approx(intra_value(b, h, y), abs=1e-12)

    def test_gradient_small_batch(self):
        rng = np.random.default_rng(3)
        b = bank_with(rng.normal(size=(2, 3)))
        params = ParamSet()
        params.add("h", rng.normal(size=(4, 3)), "t")
        y = np.array([0, 1, 1, 0])
        res = finite_diff_check(lambda g, p: intra_loss(g, b, "t", p["h"], y), params, tol=1e-4)
        assert res.ok, res

    @staticmethod
    def _instance(seed, tau):
        rng = np.random.default_rng([seed, 5])
        k, d, n = int(rng.integers(2, 5)), int(rng.integers(2, 17)), int(rng.integers(2, 9))
        b = bank_with(rng.normal(size=(k, d)), tau=tau)
        params = ParamSet()
        params.add("h", rng.normal(size=(n, d)), "t")
        y = rng.integers(0, k, n)
        return (lambda g, p: intra_loss(g, b, "t", p["h"], y)), params

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_random_instances(self, seed):
        # tau=0.5 keeps every coordinate's gradient well above central-difference roundoff
        f, params = self._instance(seed, 0.5)
        res = finite_diff_check(f, params, tol=1e-4)
        assert res.ok, res

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_default_tau_absolute(self, seed):
        # at tau=0.07 saturated samples have ~1e-8 gradients, so bound the absolute gap instead
        f, params = self._instance(seed, 0.07)
        assert fd_abs_error(f, params) < 1e-8


def test_inspect_csv(tmp_path):
    b = bank_with([[1.0, 2.0], [3.0, 4.0]])
    b.write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "modality,class,dim,value"
    assert lines[1:] == ["t,0,0,1.0", "t,0,1,2.0", "t,1,0,3.0", "t,1,1,4.0"]
