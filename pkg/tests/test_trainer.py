import math

import numpy as np
import pytest

import pase.trainer as trainer
from pase.data import SynthSpec, gen_synthetic
from pase.diffcore import Graph, finite_diff_check
from pase.fusion import ModalityWeights
from pase.model import PaSEModel, cross_entropy
from pase.otalign import inter_loss
from pase.prototypes import PrototypeBank, intra_loss
from pase.shapley import ShapleyReport
from pase.trainer import (
    BALANCED,
    WARMUP,
    TrainConfig,
    TrainingError,
    align_loss,
    batch_order,
    build_state,
    evaluate,
    evaluate_model,
    load_run,
    phase_transition_check,
    read_checkpoint,
    run_training,
    total_loss,
    train_step,
    write_checkpoint,
)

SMALL = dict(embed_dim=8, encoder_hidden=16, ffn_hidden=16, fusion_dim=8, head_hidden=8, batch_size=32)


@pytest.fixture(scope="module")
def small_ds():
    return gen_synthetic(SynthSpec(n=240, k=3, dims=(6, 5, 4), seed=3))


def config(**kw):
    base = dict(SMALL, lr=1e-3, max_epochs=3)
    base.update(kw)
    return TrainConfig(**base)


def trajectory(state):
    return [(r["loss"], r["task"], r["align"], r["val_acc"]) for r in state.history]


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr, c.batch_size, c.max_epochs, c.gamma, c.ot_reg) == (1e-5, 64, 200, 0.98, 0.01)
        assert (c.mu, c.alpha, c.beta, c.tau, c.rho, c.patience, c.min_delta) == (0.1, 0.1, 0.05, 0.07, 0.5, 5, 1e-3)

    @pytest.mark.parametrize(
        "kw", [{"lr": 0.0}, {"gamma": 1.5}, {"fusion": "max"}, {"modalities": ["x"]}, {"transition_epoch": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw).validate()

    def test_batch_larger_than_train_split(self, small_ds):
        with pytest.raises(ValueError, match="batch_size"):
            build_state(config(batch_size=10_000), small_ds)

    def test_round_trip_and_unknown_keys(self):
        c = config(seed=4)
        assert TrainConfig.from_dict(c.to_dict()) == c
        with pytest.raises(KeyError, match="unknown config keys"):
            TrainConfig.from_dict({"learning_rate": 1.0})


class TestLossComposition:
    def test_every_step_identity(self, small_ds):
        state = build_state(config(mu=0.1), small_ds)
        for epoch in range(2):
            state.epoch = epoch
            for idx in batch_order(small_ds, state.config, epoch + 1):
                x = {m: small_ds.features[m][idx] for m in state.model.modalities}
                r = train_step(state, x, small_ds.labels[idx])
                assert abs(r.total - (r.task + 0.1 * r.align)) <= 1e-12
        assert r.align > 0

    def test_mu_zero(self, small_ds):
        state = build_state(config(mu=0.0), small_ds)
        idx = batch_order(small_ds, state.config, 1)[0]
        for _ in range(3):
            r = train_step(state, {m: small_ds.features[m][idx] for m in "tav"}, small_ds.labels[idx])
            assert r.total == r.task

    def test_graph_identities(self):
        g = Graph()
        task, align = g.leaf(0.7), g.leaf(2.3)
        assert g.scalar(total_loss(g, task, align, 0.1)) == 0.7 + 0.1 * 2.3
        assert g.scalar(total_loss(g, task, align, 0.0)) == 0.7
        intra = {"t": g.leaf(1.5)}
        assert g.scalar(align_loss(g, intra, {"t": 1.0}, g.leaf(0.0))) == 1.5

    def test_single_modality_align_is_intra(self, small_ds):
        state = build_state(config(modalities=["t"]), small_ds)
        idx = batch_order(small_ds, state.config, 1)[0]
        r = train_step(state, {"t": small_ds.features["t"][idx]}, small_ds.labels[idx])
        assert r.alpha == {"t": 1.0} and r.inter == 0.0
        assert r.align == r.intra["t"]

    def test_zero_features_zero_prototypes(self):
        bank = PrototypeBank(4, {"t": 3})
        bank.initialized["t"][:] = True
        g = Graph()
        loss = intra_loss(g, bank, "t", g.leaf(np.zeros((5, 3))), np.array([0, 1, 2, 3, 0]))
        assert g.scalar(loss) == pytest.approx(math.log(4), abs=1e-12)

    def test_uniform_weights_identical_modalities(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 4))
        y = np.array([0, 1, 2, 0, 1, 2])
        bank = PrototypeBank(3, {m: 4 for m in "tav"})
        bank.init_from({m: x for m in "tav"}, y)
        g = Graph()
        h = g.leaf(x)
        intra = {m: intra_loss(g, bank, m, h, y) for m in "tav"}
        inter, _ = inter_loss(g, {m: g.leaf(bank.protos[m]) for m in "tav"})
        got = g.scalar(align_loss(g, intra, {m: 1 / 3 for m in "tav"}, inter))
        assert got == pytest.approx(np.mean([g.scalar(n) for n in intra.values()]) + g.scalar(inter), abs=1e-12)


class TestPhases:
    def state(self, ds, **kw):
        return build_state(config(**kw), ds)

    def test_flat_curve_transitions_after_patience(self, small_ds):
        st = self.state(small_ds, patience=5)
        fired = []
        for epoch in range(1, 10):
            st.epoch = epoch
            fired.append(phase_transition_check(st, 0.5))
        # epoch 1 sets the reference, epochs 2..6 are the five flat ones
        assert fired.index(True) == 5 and st.transition_epoch == 6
        assert sum(fired) == 1

    def test_strictly_improving_never_transitions(self, small_ds):
        st = self.state(small_ds)
        for epoch in range(1, 60):
            st.epoch = epoch
            assert not phase_transition_check(st, 0.01 * epoch)
        assert st.phase == WARMUP

    def test_fixed_epoch_ignores_curve(self, small_ds):
        st = self.state(small_ds, transition_epoch=20)
        for epoch in range(1, 30):
            st.epoch = epoch
            phase_transition_check(st, 0.5)
        assert st.transition_epoch == 20 and st.phase == BALANCED

    def test_phase_is_monotone(self, small_ds):
        st = self.state(small_ds, patience=1)
        seen = []
        for epoch, v in enumerate([0.5, 0.5, 0.9, 0.95, 0.99], start=1):
            st.epoch = epoch
            phase_transition_check(st, v)
            seen.append(st.phase)
        assert seen == [WARMUP, BALANCED, BALANCED, BALANCED, BALANCED]

    def test_entropy_plateau_signal(self, small_ds):
        st = self.state(small_ds, plateau_metric="entropy", patience=2)
        out = []
        for epoch, v in enumerate([1.0, 0.5, 0.5, 0.5], start=1):
            st.epoch = epoch
            out.append(phase_transition_check(st, v))
        assert out == [False, False, False, True]


class TestTrainingRuns:
    def test_deterministic(self, small_ds):
        a, fa = run_training(config(seed=5, transition_epoch=1), small_ds)
        b, fb = run_training(config(seed=5, transition_epoch=1), small_ds)
        assert trajectory(a) == trajectory(b)
        assert fa == fb
        c, _ = run_training(config(seed=6, transition_epoch=1), small_ds)
        assert trajectory(c) != trajectory(a)

    def test_sgm_off_is_plain_joint_training(self, small_ds):
        # with SGM on but the transition never reached, only the phi columns may differ
        off, _ = run_training(config(sgm="off", transition_epoch=100), small_ds)
        on, _ = run_training(config(sgm="on", transition_epoch=100), small_ds)
        assert trajectory(off) == trajectory(on)
        assert len(on.shapley) == 3 and off.shapley == []
        assert all(r["phase"] == WARMUP for r in off.history)

    def test_unit_factors_match_phase_one(self, small_ds, monkeypatch):
        real = trainer.shapley_report

        def unit(state, ds):
            r = real(state, ds)
            return ShapleyReport(r.epoch, r.psi, r.psi_norm, {m: 1.0 for m in r.phi})

        monkeypatch.setattr(trainer, "shapley_report", unit)
        balanced, _ = run_training(config(transition_epoch=1), small_ds)
        assert [r["phase"] for r in balanced.history] == [WARMUP, BALANCED, BALANCED]
        monkeypatch.undo()
        plain, _ = run_training(config(sgm="off"), small_ds)
        assert trajectory(balanced) == trajectory(plain)

    def test_modulation_changes_dynamics(self, small_ds):
        on, _ = run_training(config(transition_epoch=1), small_ds)
        off, _ = run_training(config(sgm="off"), small_ds)
        assert trajectory(on)[0] == trajectory(off)[0]
        assert trajectory(on)[1:] != trajectory(off)[1:]
        assert any(r["phi_t"] < 1.0 or r["phi_a"] < 1.0 or r["phi_v"] < 1.0 for r in on.history[1:])

    def test_nonfinite_loss_aborts(self, small_ds, monkeypatch):
        def bad(g, logp, y, k):
            return g.leaf(np.nan)

        monkeypatch.setattr(trainer, "cross_entropy", bad)
        with pytest.raises(TrainingError, match=r"non-finite loss at epoch 1.*task=nan.*\(batch 0\)"):
            run_training(config(), small_ds)

    def test_phase_one_text_probe_dominates(self):
        ds = gen_synthetic(SynthSpec(n=900, k=3, separation=(3.0, 0.5, 0.5), seed=1))
        state, _ = run_training(TrainConfig(sgm="off", max_epochs=30, lr=1e-3), ds)
        last = state.history[-1]
        assert last["probe_acc_t"] > last["probe_acc_a"]
        assert last["probe_acc_t"] > last["probe_acc_v"]


class TestEvaluation:
    def test_untrained_model_is_near_chance(self):
        ds = gen_synthetic(SynthSpec(n=2000, k=3, seed=2))
        state = build_state(config(), ds)
        g = Graph()
        idx = ds.indices("train")
        h = state.model.encode(g, state.model.params.bind(g), {m: ds.features[m][idx] for m in "tav"})
        state.model.bank.init_from({m: g.value(n) for m, n in h.items()}, ds.labels[idx])
        acc = evaluate(state, ds, "test").acc
        assert abs(acc - 1 / 3) <= 0.1

    def test_evaluate_twice_identical(self, small_ds):
        state, _ = run_training(config(max_epochs=2), small_ds)
        assert evaluate(state, small_ds).to_dict() == evaluate(state, small_ds).to_dict()

    def test_checkpoint_is_best_validation_epoch(self, small_ds):
        state, final = run_training(config(max_epochs=4), small_ds)
        vals = [r["val_acc"] for r in state.history]
        assert final["best_epoch"] == 1 + vals.index(max(vals))
        assert final["best_val_acc"] == max(vals)

    def test_checkpoint_file_round_trip(self, small_ds, tmp_path):
        state, final = run_training(config(max_epochs=2), small_ds, out_dir=tmp_path / "run")
        params, bank = state.checkpoint
        groups = {p.name: p.group for p in state.model.params}
        write_checkpoint(tmp_path / "c.bin", params, groups, bank)
        got_params, got_groups, protos, init = read_checkpoint(tmp_path / "c.bin")
        assert got_groups == groups
        for name, v in params.items():
            assert got_params[name].tobytes() == v.tobytes()
        for m in "tav":
            assert protos[m].tobytes() == bank.protos[m].tobytes()
            assert init[m].tolist() == bank.initialized[m].tolist()
        _, model, _ = load_run(tmp_path / "run", small_ds)
        assert evaluate_model(model, small_ds).report.to_dict() == final["best"]

    def test_bad_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(ValueError, match="bad magic"):
            read_checkpoint(tmp_path / "x")


def full_loss_instance(seed):
    """4-sample toy with graph-connected prototypes; weights, plans and bank held fixed."""
    rng = np.random.default_rng([seed, 31])
    dims = {"t": 3, "a": 2, "v": 2}
    model = PaSEModel(list(dims), dims, 2, embed_dim=3, encoder_hidden=4, ffn_hidden=4,
                      fusion_dim=3, head_hidden=3, seed=seed)
    # random biases keep encoder outputs away from the zero vector, where cosine similarity is singular
    for name in model.params.names():
        if name.endswith(".b"):
            model.params[name].value[:] = rng.normal(size=model.params[name].value.shape)
    x = {m: rng.normal(size=(4, d)) for m, d in dims.items()}
    y = np.array([0, 1, 0, 1])
    g = Graph()
    p = model.params.bind(g)
    h = model.encode(g, p, x)
    model.bank.init_from({m: g.value(n) for m, n in h.items()}, y)
    weights = model.weights(g, model.probes(g, p, {m: g.value(n) for m, n in h.items()}), y)
    model.weights = lambda *a, **k: ModalityWeights(dict(weights.alpha), dict(weights.scores))
    _, report = inter_loss(g, {m: model.batch_prototypes(g, h[m], m, y) for m in dims})
    plans = {pair: (pa.fwd, pa.bwd) for pair, pa in report.items()}

    def f(g, p):
        h = model.encode(g, p, x)
        fwd = model.forward(g, p, h, y)
        task = cross_entropy(g, fwd.logp, y, 2)
        intra = {m: intra_loss(g, model.bank, m, h[m], y) for m in dims}
        inter, _ = inter_loss(g, {m: model.batch_prototypes(g, h[m], m, y) for m in dims}, plans=plans)
        return total_loss(g, task, align_loss(g, intra, fwd.alpha, inter), 0.1)

    return f, model.params


@pytest.mark.parametrize("seed", range(3))
def test_full_loss_gradient(seed):
    f, params = full_loss_instance(seed)
    res = finite_diff_check(f, params, tol=1e-3)
    assert res.ok, res
