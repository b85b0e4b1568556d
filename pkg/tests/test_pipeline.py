"""Stage trainers, gating, and the feature-importance analysis."""

import json

import numpy as np
import numpy.testing as npt
import pytest

from imad.corpus import read_jsonl
from imad.galaxy import GalaxyConfig
from imad.optim import snapshot_params
from imad.pipeline import (STAGES, StageOrderError, TrainConfig, TrainingPipeline,
                           clone_pair_from_record, executable_from_record,
                           feature_importance_analysis, information_gain,
                           mam_block_from_record, required_stage, split_train_val,
                           train_toplevel)

from conftest import MICRO_GALAXY


class TestStageOrder:
    def test_required_stage_chain(self):
        assert required_stage("mam") is None
        assert required_stage("clone") == "mam"
        assert required_stage("toplevel-code-only") == "clone"
        assert required_stage("toplevel-full") == "toplevel-code-only"

    def test_out_of_order_stage_rejected(self, tmp_path):
        from imad.corpus import CorpusSizes, generate_corpus

        corpus = tmp_path / "corpus"
        generate_corpus(corpus, sizes=CorpusSizes(10, 4, 6), seed=0)
        pipeline = TrainingPipeline(corpus, tmp_path / "model",
                                    galaxy_config=GalaxyConfig(**MICRO_GALAXY),
                                    train_config=TrainConfig(max_epochs=1))
        with pytest.raises(StageOrderError) as info:
            pipeline.run_stage("clone")
        assert info.value.required == "mam"
        with pytest.raises(StageOrderError) as info:
            pipeline.run_stage("toplevel-full")
        assert info.value.required == "toplevel-code-only"

    def test_unknown_stage_rejected(self, tmp_path):
        pipeline = TrainingPipeline(tmp_path, tmp_path / "m")
        with pytest.raises(ValueError, match="unknown stage"):
            pipeline.run_stage("fine-tune")


class TestSplits:
    def test_stratified_split(self, rng):
        labels = np.array([0] * 80 + [1] * 20)
        train, val = split_train_val(100, 0.1, rng, labels=labels)
        assert len(set(train) & set(val)) == 0
        assert len(train) + len(val) == 100
        val_labels = labels[val]
        assert (val_labels == 0).sum() == 8
        assert (val_labels == 1).sum() == 2

    def test_plain_split(self, rng):
        train, val = split_train_val(50, 0.2, rng)
        assert len(val) == 10 and len(train) == 40


class TestMicroPipeline:
    def test_artifacts_written(self, micro_pipeline):
        model_dir = micro_pipeline["model_dir"]
        for stage in STAGES:
            assert (model_dir / f"{stage}.ckpt").exists()
            assert (model_dir / f"metrics_{stage}.csv").exists()
            manifest = json.loads((model_dir / f"run_{stage}.json").read_text())
            assert manifest["stage"] == stage
            assert manifest["result"]["epochs"]
            assert "mam.jsonl" in manifest["config"]["corpus_hashes"]

    def test_metrics_csv_shape(self, micro_pipeline):
        lines = (micro_pipeline["model_dir"] / "metrics_mam.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,val_metric"
        assert len(lines) == len(micro_pipeline["results"]["mam"].epochs) + 1

    def test_early_stopping_restores_best(self, micro_pipeline):
        for result in micro_pipeline["results"].values():
            assert result.best_val_loss <= result.epochs[-1].val_loss + 1e-12

    def test_full_checkpoint_contains_feature_schema(self, micro_pipeline):
        from imad.checkpoint import load_checkpoint

        config, values = load_checkpoint(
            micro_pipeline["model_dir"] / "toplevel-full.ckpt")
        assert config["stage"] == "toplevel-full"
        assert "feature_schema" in config
        assert "standardizer.mean" in values
        assert any(k.startswith("iffnn.") for k in values)
        assert any(k.startswith("galaxy.star_galaxy.") for k in values)


class TestFreezeContract:
    def test_lower_levels_bit_identical_through_toplevel(self, micro_pipeline, tmp_path):
        """The two pre-trained encoder levels must not move during either
        top-level pass."""
        pipeline = micro_pipeline["pipeline"]
        model, _, _ = pipeline.model_from_checkpoint("clone")
        frozen_before = snapshot_params(model.component_parameters("satellite_planet"))
        frozen_before.update(snapshot_params(model.component_parameters("planet_star")))

        records = read_jsonl(micro_pipeline["corpus_dir"] / "executables.jsonl")
        executables = [executable_from_record(r, model.opcode_vocab, model.operand_vocab)
                       for r in records]
        labels = [r["label"] for r in records]
        train_toplevel(model, executables, np.zeros((len(labels), 0)), labels,
                       "code-only", TrainConfig(max_epochs=2, batch_size=8, seed=1))

        frozen_after = snapshot_params(model.component_parameters("satellite_planet"))
        frozen_after.update(snapshot_params(model.component_parameters("planet_star")))
        for name, before in frozen_before.items():
            npt.assert_array_equal(before, frozen_after[name], err_msg=name)
        # and the trained level did move
        star = snapshot_params(model.component_parameters("star_galaxy"))
        reference, _, _ = pipeline.model_from_checkpoint("clone")
        moved = any(
            not np.array_equal(star[name],
                               reference.component_parameters("star_galaxy")[name].data)
            for name in star)
        assert moved

    def test_toplevel_mode_validation(self, micro_pipeline):
        pipeline = micro_pipeline["pipeline"]
        model, _, _ = pipeline.model_from_checkpoint("clone")
        with pytest.raises(ValueError, match="mode"):
            train_toplevel(model, [], np.zeros((0, 0)), [], "both",
                           TrainConfig(max_epochs=1))


class TestRecordAdapters:
    def test_mam_and_clone_adapters(self, micro_pipeline, isa_vocabs):
        opcodes, operands = isa_vocabs
        mam = read_jsonl(micro_pipeline["corpus_dir"] / "mam.jsonl")[0]
        block = mam_block_from_record(mam, opcodes, operands)
        assert len(block) == len(mam["functions"][0][0])
        clone = read_jsonl(micro_pipeline["corpus_dir"] / "clone.jsonl")[0]
        f1, f2, label = clone_pair_from_record(clone, opcodes, operands)
        assert label in (-1, 1)
        assert len(f1) == len(clone["functions"][0])

    def test_clone_adapter_rejects_extra_functions(self, isa_vocabs):
        opcodes, operands = isa_vocabs
        record = {"id": "x", "label": 1,
                  "functions": [[[["nop", "EMPTY", "EMPTY"]]]] * 3}
        with pytest.raises(ValueError, match="two functions"):
            clone_pair_from_record(record, opcodes, operands)


class TestInformationGain:
    def test_perfect_binary_separator_on_balanced_labels(self):
        x = np.array([0.0] * 50 + [1.0] * 50)
        y = np.array([0] * 50 + [1] * 50)
        assert information_gain(x, y) == pytest.approx(1.0)

    def test_constant_feature_is_zero(self):
        x = np.full(80, 3.3)
        y = np.array([0, 1] * 40)
        assert information_gain(x, y) == 0.0

    def test_independent_feature_near_zero(self, rng):
        x = rng.normal(size=400)
        y = (rng.random(400) > 0.5).astype(int)
        assert information_gain(x, y) < 0.15

    def test_bounded_by_label_entropy(self, rng):
        x = rng.normal(size=200)
        y = (x > 0.3).astype(int)
        ig = information_gain(x, y)
        p = y.mean()
        h_y = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
        assert 0.0 <= ig <= h_y + 1e-12


class TestImportanceAnalysis:
    def _dataset(self, rng):
        n = 300
        y = np.array([0, 1] * (n // 2))
        strong = y + rng.normal(scale=0.1, size=n)       # near-perfect signal
        weak = 0.8 * y + rng.normal(scale=1.0, size=n)   # partial signal
        noise = rng.normal(size=n)                       # none
        return np.column_stack([strong, weak, noise]), y

    def test_ig_orders_by_signal_strength(self, rng):
        X, y = self._dataset(rng)
        report = feature_importance_analysis(
            X, y, np.zeros(3), ["strong", "weak", "noise"])
        assert report.ig_scores[0] > report.ig_scores[1] > report.ig_scores[2]
        assert report.gini_scores[0] == max(report.gini_scores)

    def test_spearman_extremes_on_constructed_rankings(self, rng):
        """Counts that replicate the IG order give rho exactly 1; the reversed
        counts give exactly -1."""
        X, y = self._dataset(rng)
        probe = feature_importance_analysis(X, y, np.zeros(3), list("abc"))
        order = np.argsort(-probe.ig_scores)
        aligned = np.zeros(3)
        aligned[order] = [3, 2, 1]
        report = feature_importance_analysis(X, y, aligned, list("abc"))
        assert report.spearman["attribution_vs_ig"] == pytest.approx(1.0)
        reversed_counts = np.zeros(3)
        reversed_counts[order] = [1, 2, 3]
        report = feature_importance_analysis(X, y, reversed_counts, list("abc"))
        assert report.spearman["attribution_vs_ig"] == pytest.approx(-1.0)

    def test_report_serialization(self, rng):
        X, y = self._dataset(rng)
        report = feature_importance_analysis(X, y, np.array([5, 1, 0]),
                                             ["strong", "weak", "noise"])
        payload = report.to_dict()
        assert len(payload["features"]) == 3
        assert set(payload["spearman"]) == {"attribution_vs_ig",
                                            "attribution_vs_gini", "ig_vs_gini"}

    def test_axis_mismatch_rejected(self, rng):
        with pytest.raises(ValueError, match="mismatch"):
            feature_importance_analysis(rng.normal(size=(10, 3)), np.zeros(10),
                                        np.zeros(2), ["a", "b", "c"])
