import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import kendalltau

from semrel.core.tape import Tape
from semrel.data import SynthSpec
from semrel.srr import Batch, Variant, forward, init_params, loss_on_tape
from semrel.train import RunConfig, TrainingDiverged, ablate, kendall_tau_batch, load_data, rank_agreement, train
from semrel.train.report import load_checkpoint
from semrel.train.trainer import SplitData, predict

TINY = SynthSpec(seed=0, n={"train": 120, "dev": 40, "test": 40}, d=6, K=3)


def tiny_config(**kw):
    return RunConfig(**{"synth": TINY, "epochs": 2, "batch_size": 16, **kw})


@pytest.fixture(scope="module")
def tiny_data():
    return load_data(tiny_config())


class TestRunConfig:
    def test_empty_seeds(self):
        with pytest.raises(ValueError, match="seeds"):
            tiny_config(seeds=[])

    @pytest.mark.parametrize("name", ["lr", "batch_size", "epochs", "tau"])
    def test_nonpositive(self, name):
        with pytest.raises(ValueError, match=name):
            tiny_config(**{name: 0})

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            tiny_config(lam=-0.1)

    def test_needs_data_source(self):
        with pytest.raises(ValueError, match="synth"):
            RunConfig()

    def test_exclusive_toggles(self):
        with pytest.raises(ValueError, match="mutually exclusive"):
            tiny_config(no_srr=True, classic_mode="Or")

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            RunConfig.from_json({"synth": TINY.to_json(), "learning_rate": 1.0})

    def test_json_round_trip(self):
        cfg = tiny_config(seeds=[1, 2], classic_mode="Not", lam=0.1)
        back = RunConfig.from_json(json.loads(json.dumps(cfg.to_json())))
        assert back == cfg

    def test_variant_mapping(self):
        assert tiny_config().variant == Variant("srr")
        assert tiny_config(no_srr=True).variant.kind == "concat"
        assert tiny_config(drop_relation="inconsistency").variant.label == "srr-no-inconsistency"
        assert tiny_config(no_rank_loss=True).effective_lam == 0.0


class TestTraining:
    def test_deterministic(self, tiny_data):
        a = train(tiny_config(), tiny_data).runs[0]
        b = train(tiny_config(), tiny_data).runs[0]
        assert a.curves == b.curves
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        assert a.reports["test"] == b.reports["test"]

    def test_seeds_differ(self, tiny_data):
        res = train(tiny_config(seeds=[0, 1]), tiny_data)
        assert res.runs[0].curves["train_loss"] != res.runs[1].curves["train_loss"]
        assert res.mean["test"].acc == pytest.approx(np.mean([r.reports["test"].acc for r in res.runs]))

    def test_noise_free_data_reaches_99_percent(self):
        spec = SynthSpec(seed=0, noise=0.0, n={"train": 500, "dev": 200, "test": 100})
        run = train(RunConfig(synth=spec, epochs=20)).runs[0]
        assert run.reports["dev"].acc >= 99.0

    def test_best_epoch_maximizes_dev_wf1(self, tiny_data):
        run = train(replace(tiny_config(), epochs=4), tiny_data).runs[0]
        wf1 = run.curves["dev_weighted_f1"]
        assert wf1[run.best_epoch - 1] == max(wf1)
        assert run.reports["dev"].weighted_f1 == pytest.approx(max(wf1))

    def test_no_rank_loss_is_cross_entropy(self, tiny_data, rng):
        split = tiny_data.splits["train"]
        params = init_params("srr", tiny_data.d, tiny_data.K, rng=rng)
        batch = Batch(split.X[:20], split.y[:20], split.relevance[:20])
        cfg = tiny_config(no_rank_loss=True)
        tape = Tape()
        loss, info = loss_on_tape(tape, {k: tape.var(v) for k, v in params.items()}, batch, lam=cfg.effective_lam)
        tape2 = Tape()
        logits = forward(tape2.constant(batch.X), {k: tape2.constant(v) for k, v in params.items()}).logits.value
        ce = np.mean(logsumexp(logits, axis=1) - logits[np.arange(20), batch.y])
        assert float(loss.value) == pytest.approx(ce, abs=1e-12)
        assert info["rank"] == 0.0

    def test_no_rank_loss_matches_zero_lambda(self, tiny_data):
        a = train(tiny_config(no_rank_loss=True), tiny_data).runs[0]
        b = train(tiny_config(lam=0.0), tiny_data).runs[0]
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_classic_or_dispatch(self, tiny_data):
        res = train(tiny_config(classic_mode="Or"), tiny_data)
        run = res.runs[0]
        assert run.variant == "Or"
        assert set(run.params) == {"W_cls", "b_cls"}
        assert run.params["W_cls"].shape == (tiny_data.K, tiny_data.d)
        assert run.rank_agreement == {}
        assert 0 <= run.reports["test"].acc <= 100

    def test_nan_aborts_with_diagnostics(self, tiny_data):
        X = tiny_data.splits["train"].X.copy()
        X[5] = np.nan
        bad = replace(tiny_data, splits={**tiny_data.splits, "train": replace(tiny_data.splits["train"], X=X)})
        with pytest.raises(TrainingDiverged, match=r"lr=.*epoch=1.*batch=\d+"):
            train(tiny_config(), bad)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="d="):
            load_data(tiny_config(d=99))


class TestKendall:
    def test_identical_orderings(self, rng):
        rel = np.tile([3.0, 2.0, 1.0, 0.0], (10, 1))
        scores = rel * 0.1 + rng.normal(size=(10, 1))
        np.testing.assert_allclose(kendall_tau_batch(scores, rel), 1.0)

    def test_reversed_fine_slots_hit_enumerated_minimum(self):
        rel = np.array([[3.0, 2.0, 1.0, 0.0]])
        taus = []
        for perm in itertools.permutations([2.0, 1.0, 0.0]):
            taus.append(kendalltau([3.0, *perm], rel[0]).statistic)
        reversed_scores = np.array([[0.9, 0.01, 0.04, 0.05]])
        assert kendall_tau_batch(reversed_scores, rel)[0] == pytest.approx(min(taus))
        assert min(taus) == pytest.approx(0.0)

    def test_random_scores_average_near_zero(self):
        rng = np.random.default_rng(7)
        rel = np.tile([3.0, 2.0, 1.0, 0.0], (20000, 1))
        tau = kendall_tau_batch(rng.random((20000, 4)), rel)
        assert abs(tau.mean()) < 0.02

    def test_matches_scipy_on_random_rows(self, rng):
        scores = rng.normal(size=(50, 4))
        rel = np.array([rng.permutation(4) for _ in range(50)], dtype=float)
        ours = kendall_tau_batch(scores, rel)
        ref = [kendalltau(s, r).statistic for s, r in zip(scores, rel)]
        np.testing.assert_allclose(ours, ref, atol=1e-12)

    def test_rank_agreement_on_planted_alphas(self, tiny_data):
        split = tiny_data.splits["dev"]
        params = init_params("srr", tiny_data.d, tiny_data.K, rng=0)
        _, alpha = predict(params, split.X)
        value = rank_agreement(params, split)
        assert value == pytest.approx(kendall_tau_batch(alpha, split.relevance).mean())
        with pytest.raises(ValueError):
            rank_agreement(params, SplitData(split.X, split.y, None, split.ids))
        with pytest.raises(ValueError):
            rank_agreement(init_params("Or", tiny_data.d, tiny_data.K, rng=0), split, Variant("Or"))


class TestOutputs:
    def test_train_writes_reports_and_checkpoint(self, tmp_path, tiny_data):
        train(tiny_config(out_dir=str(tmp_path)), tiny_data)
        for name in ("report.json", "report.txt", "confusion_test.csv", "confusion_test.png", "curves.png", "best.npz", "best.json"):
            assert (tmp_path / name).exists(), name
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["variant"] == "srr" and len(rep["runs"]) == 1
        lines = (tmp_path / "confusion_test.csv").read_text().splitlines()
        assert len(lines) == 1 + tiny_data.K
        assert sum(int(v) for line in lines[1:] for v in line.split(",")[1:]) == len(tiny_data.splits["test"])
        params, meta = load_checkpoint(tmp_path / "best.npz")
        assert meta["variant"] == "srr" and meta["K"] == tiny_data.K
        assert set(params) == {"W1", "b1", "W2", "b2", "W_cls", "b_cls"}

    def test_ablation_reports_deltas(self, tmp_path, tiny_data):
        res = ablate(tiny_config(out_dir=str(tmp_path)), ["drop_inconsistency", "classic_And"], tiny_data)
        assert list(res.results) == ["full", "drop_inconsistency", "classic_And"]
        d = res.deltas()
        assert set(d) == {"drop_inconsistency", "classic_And"}
        full = res.results["full"].mean["test"].acc
        assert d["classic_And"]["acc"] == pytest.approx(res.results["classic_And"].mean["test"].acc - full)
        assert "delta vs full" in (tmp_path / "ablation.txt").read_text()
        assert (tmp_path / "ablation.png").exists()

    def test_unknown_ablation(self, tiny_data):
        with pytest.raises(ValueError, match="unknown ablation"):
            ablate(tiny_config(), ["drop_everything"], tiny_data)
