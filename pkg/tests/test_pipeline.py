import itertools
import json

import numpy as np
import pytest
import torch
import yaml

import apparent_age.pipeline as P
from apparent_age.datasets import DatasetManifest, SampleRecord, SyntheticSpec, generate_synthetic, load_manifest
from apparent_age.exceptions import InvalidInputError
from apparent_age.pipeline import (
    FULL_SCALE_SEQUENCES,
    StagePlan,
    TrainingError,
    evaluate_run,
    execute_run,
    expand_run_matrix,
    load_checkpoint,
    load_run_config,
    read_predictions,
    run_stage,
    write_predictions,
)

from conftest import REPO, TINY_BACKBONE


def weights_of(ckpt):
    return torch.load(ckpt.weights_path, weights_only=True)


def plan(data, name="tiny", **kw):
    base = dict(epochs=1, learning_rate=0.01, batch_size=8, clip_grad_norm=5.0)
    return StagePlan(name, str(data.root / "manifest.csv"), **{**base, **kw})


class TestRunMatrix:
    def test_full_scale_18(self):
        m = expand_run_matrix({"sequences": FULL_SCALE_SEQUENCES, "losses": ["ce", "mvl", "amrl"]})
        assert len(m) == 18
        assert [(tuple(r.sequence), r.objective) for r in m.runs] == [
            (tuple(s), loss) for s in FULL_SCALE_SEQUENCES for loss in ("ce", "mvl", "amrl")]
        assert len({r.run_id for r in m.runs}) == 18

    def test_single(self):
        m = expand_run_matrix({"sequences": [["a"]], "losses": ["ce"]})
        assert [r.run_id for r in m.runs] == ["ce__a"]

    def test_two_by_three_order(self):
        m = expand_run_matrix({"sequences": [["a"], ["a", "b"]], "losses": ["ce", "mvl", "amrl"]})
        assert [r.run_id for r in m.runs] == ["ce__a", "mvl__a", "amrl__a", "ce__a+b", "mvl__a+b", "amrl__a+b"]

    def test_bijection(self):
        seqs = [["a"], ["b"], ["a", "b"], ["b", "a"]]
        losses = ["amrl", "ce"]
        m = expand_run_matrix({"sequences": seqs, "losses": losses})
        assert {(tuple(r.sequence), r.objective) for r in m.runs} == set(
            itertools.product(map(tuple, seqs), losses))
        assert len(m.runs) == len(seqs) * len(losses)

    @pytest.mark.parametrize("cfg", [{"sequences": [], "losses": ["ce"]}, {"sequences": [["a"]], "losses": []},
                                     {"sequences": [["a"]], "losses": ["l1"]}, {"sequences": [[]], "losses": ["ce"]},
                                     {"sequences": [["a"], ["a"]], "losses": ["ce"]}])
    def test_invalid(self, cfg):
        with pytest.raises(InvalidInputError):
            expand_run_matrix(cfg)

    def test_full_scale_config(self):
        cfg = load_run_config(REPO / "configs/full_scale.yaml", base_dir=REPO)
        assert len(cfg.matrix()) == 18
        assert cfg.settings.backbone["name"] == "vgg16"
        assert [p.dataset_name for p in cfg.stage_plans(FULL_SCALE_SEQUENCES[-1])] == list(FULL_SCALE_SEQUENCES[-1])

    def test_undefined_dataset(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text(yaml.safe_dump({"datasets": {"a": {"manifest": "a.csv"}}, "sequences": [["b"]],
                                     "losses": ["ce"]}))
        with pytest.raises(InvalidInputError, match="undefined dataset"):
            load_run_config(p)


class TestStage:
    def test_smoke_16_samples(self, tmp_path, tiny_settings):
        data = generate_synthetic(SyntheticSpec(count=20, image_size=16, seed=2, splits=(0.8, 0.2, 0.0)),
                                  tmp_path / "d")
        assert len(data.split("train")) == 16
        ckpt = run_stage(None, plan(data), "ce", tiny_settings, 0, "smoke", tmp_path / "out")
        assert ckpt.weights_path.exists() and (tmp_path / "out/checkpoint.json").exists()
        stage = ckpt.metrics_so_far["stages"][0]
        assert len(stage["train_loss"]) == 1 and np.isfinite(stage["train_loss"][0])
        assert np.isfinite(stage["val_loss"][0])

    @pytest.mark.parametrize("objective", ["ce", "mvl", "amrl"])
    def test_deterministic(self, tmp_path, tiny_data, tiny_settings, objective):
        a = run_stage(None, plan(tiny_data, epochs=2), objective, tiny_settings, 0, "a", tmp_path / "a")
        b = run_stage(None, plan(tiny_data, epochs=2), objective, tiny_settings, 0, "b", tmp_path / "b")
        va, vb = a.metrics_so_far["stages"][0]["val_loss"], b.metrics_so_far["stages"][0]["val_loss"]
        assert va == pytest.approx(vb, abs=1e-6)

    def test_zero_learning_rate(self, tmp_path, tiny_data, tiny_settings):
        init = P.fresh_model(tiny_settings).state_dict()
        ckpt = run_stage(None, plan(tiny_data, epochs=3, learning_rate=0.0), "mvl", tiny_settings, 0, "z", tmp_path)
        after = weights_of(ckpt)
        for k in init:
            assert torch.equal(init[k], after[k]), k
        train = ckpt.metrics_so_far["stages"][0]["train_loss"]
        # batches are reshuffled each epoch, so only float32 summation order differs
        assert train == pytest.approx([train[0]] * 3, rel=1e-6)

    def test_policy_mismatch(self, tmp_path, tiny_data, tiny_settings):
        with pytest.raises(Exception, match="range_midpoint"):
            run_stage(None, plan(tiny_data, label_policy="range_midpoint"), "ce", tiny_settings, 0, "x", tmp_path)

    def test_non_finite_loss_aborts(self, tmp_path, tiny_data, tiny_settings, monkeypatch):
        class Broken(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.zeros(1))

            def forward(self, x):
                return torch.full((x.shape[0], 101), float("nan")) + self.w

        monkeypatch.setattr(P, "fresh_model", lambda s: Broken())
        with pytest.raises(TrainingError, match="epoch 0 batch 0: non-finite"):
            run_stage(None, plan(tiny_data), "ce", tiny_settings, 0, "nan", tmp_path)

    def test_checkpoint_round_trip(self, tiny_checkpoint):
        back = load_checkpoint(tiny_checkpoint.directory)
        assert back.config_hash == tiny_checkpoint.config_hash
        assert back.objective == "amrl" and back.grid == list(range(101))
        model = back.build_model()
        ref = weights_of(tiny_checkpoint)
        for k, v in model.state_dict().items():
            assert torch.equal(v, ref[k])


def _config(tmp_path, data_a, data_b, sequences, out="runs"):
    raw = {
        "backbone": TINY_BACKBONE, "seed": 3,
        "defaults": {"epochs": 1, "learning_rate": 0.01, "batch_size": 8, "clip_grad_norm": 5.0},
        "datasets": {"a": {"manifest": str(data_a.root / "manifest.csv")},
                     "b": {"manifest": str(data_b.root / "manifest.csv"), "label_policy": "real"}},
        "sequences": sequences, "losses": ["mvl"], "output_dir": str(tmp_path / out),
    }
    p = tmp_path / f"{out}.yaml"
    p.write_text(yaml.safe_dump(raw))
    return load_run_config(p)


@pytest.fixture(scope="module")
def two_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("two")
    a = generate_synthetic(SyntheticSpec(count=24, image_size=16, seed=1), root / "a")
    b = generate_synthetic(SyntheticSpec(count=24, image_size=16, seed=2), root / "b")
    return a, b


class TestResume:
    def test_split_equals_joint(self, tmp_path, two_sets):
        a, b = two_sets
        joint_cfg = _config(tmp_path, a, b, [["a", "b"]], "joint")
        joint = execute_run(joint_cfg, joint_cfg.matrix().runs[0])

        plans = joint_cfg.stage_plans(["a", "b"])
        s = joint_cfg.settings
        first = run_stage(None, plans[0], "mvl", s, 0, "split", tmp_path / "split/stage0")
        reloaded = load_checkpoint(first.directory)
        second = run_stage(reloaded, plans[1], "mvl", s, 1, "split", tmp_path / "split/stage1")

        wj, ws = weights_of(joint[-1]), weights_of(second)
        for k in wj:
            assert torch.equal(wj[k], ws[k]), k
        assert second.config_hash == joint[-1].config_hash
        assert len(second.metrics_so_far["stages"]) == 2

    def test_matching_stages_are_skipped(self, tmp_path, two_sets):
        a, b = two_sets
        cfg = _config(tmp_path, a, b, [["a", "b"]])
        run = cfg.matrix().runs[0]
        execute_run(cfg, run)
        stamp = (cfg.output_dir / run.run_id / "stage0/checkpoint.pt").stat().st_mtime_ns
        execute_run(cfg, run)
        assert (cfg.output_dir / run.run_id / "stage0/checkpoint.pt").stat().st_mtime_ns == stamp
        execute_run(cfg, run, resume=False)
        assert (cfg.output_dir / run.run_id / "stage0/checkpoint.pt").stat().st_mtime_ns != stamp

    def test_changed_config_retrains(self, tmp_path, two_sets):
        a, b = two_sets
        cfg = _config(tmp_path, a, b, [["a"]])
        run = cfg.matrix().runs[0]
        first = execute_run(cfg, run)[0]
        cfg.stage_defaults["learning_rate"] = 0.02
        second = execute_run(cfg, run)[0]
        assert first.config_hash != second.config_hash


class Uniform(torch.nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0], 101)


class TestEvaluate:
    @pytest.mark.parametrize("objective", ["ce", "amrl"])
    def test_uniform_model_predicts_midpoint(self, tiny_data, tiny_checkpoint, objective):
        ckpt = load_checkpoint(tiny_checkpoint.directory)
        ckpt.objective = objective
        preds = evaluate_run(ckpt, tiny_data, "test", model=Uniform())
        assert len(preds) == len(tiny_data.split("test"))
        assert all(p.predicted_age == pytest.approx(50.0, abs=1e-9) for p in preds)

    def test_empty_split_warns(self, tiny_data, tiny_checkpoint):
        empty = DatasetManifest("e", [], None, tiny_data.root)
        with pytest.warns(UserWarning, match="no evaluable rows"):
            assert list(evaluate_run(tiny_checkpoint, empty, "test")) == []

    def test_unlabeled_rows_skipped(self, tiny_data, tiny_checkpoint):
        recs = list(tiny_data.split("test").records)
        extra = SampleRecord("nolabel", recs[0].image_path, age_range=(20, 29), split="test")
        m = DatasetManifest("m", recs + [extra], None, tiny_data.root)
        with pytest.warns(UserWarning, match="1 rows skipped"):
            preds = evaluate_run(tiny_checkpoint, m, "test")
        assert preds.skipped == 1 and len(preds) == len(recs)

    def test_predictions_round_trip(self, tmp_path, tiny_data, tiny_checkpoint):
        preds = evaluate_run(tiny_checkpoint, tiny_data, "test")
        path = write_predictions(tmp_path / "p.csv", tiny_data, preds)
        assert read_predictions(path) == list(preds)
        assert load_manifest(path).records == tiny_data.split("test").records

    def test_predictions_in_grid_range(self, tiny_data, tiny_checkpoint):
        preds = evaluate_run(tiny_checkpoint, tiny_data, "test")
        assert all(0 <= p.predicted_age <= 100 for p in preds)
        meta = json.loads((tiny_checkpoint.directory / "checkpoint.json").read_text())
        assert meta["objective"] == "amrl" and meta["stage_index"] == 0


class TestBackbones:
    @pytest.mark.parametrize("spec,shape", [
        (TINY_BACKBONE, (2, 1, 16, 16)),
        ({"name": "vgg16", "image_size": 224, "in_channels": 3}, (1, 3, 224, 224)),
    ])
    def test_contract(self, spec, shape):
        from apparent_age.backbones import build_backbone

        net = build_backbone(spec, 101).eval()
        captured = []
        layer = dict(net.named_modules())[net.embedding_layer]
        layer.register_forward_hook(lambda _m, _i, out: captured.append(out))
        with torch.no_grad():
            out = net(torch.zeros(shape))
        assert out.shape == (shape[0], 101)
        assert captured[0].shape == (shape[0], net.embedding_dim)

    def test_unknown(self):
        from apparent_age.backbones import build_backbone

        with pytest.raises(InvalidInputError):
            build_backbone({"name": "resnet"}, 101)


def test_config_hash_tracks_thread_count(tiny_data, tiny_settings):
    # intra-op thread count changes float reduction order, so it is part of the hash
    from dataclasses import replace

    from apparent_age.pipeline import config_hash

    plans = [plan(tiny_data)]
    assert config_hash(tiny_settings, "ce", plans) != config_hash(replace(tiny_settings, threads=4), "ce", plans)
    assert config_hash(tiny_settings, "ce", plans) != config_hash(tiny_settings, "mvl", plans)
