import json

import numpy as np
import pytest
from click.testing import CliRunner

from promptseed.cli import main
from promptseed.evalio import codecs, synth


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    result = CliRunner().invoke(main, ["synth-data", "--seed", "4", "--n", "3", "--out", str(root)])
    assert result.exit_code == 0, result.output
    return root


def test_synth_data_layout(dataset):
    registry, scenes = synth.read_dataset(dataset)
    assert len(scenes) == 3 and registry.num_foreground == 3
    assert all(s.gt is not None and s.masks for _, s in scenes)


def test_train_gen_eval_roundtrip(dataset, tmp_path):
    runner = CliRunner()
    state = tmp_path / "state.bin"
    res = runner.invoke(main, ["train-prompts", "--data", str(dataset), "--out", str(state),
                               "--max-steps", "2", "--set", "batch_size=2"])
    assert res.exit_code == 0, res.output
    report = json.loads(res.output)
    assert report["steps"] == 2 and np.isfinite(report["loss_after"])
    seeds = tmp_path / "seeds"
    res = runner.invoke(main, ["gen-seeds", "--state", str(state), "--data", str(dataset), "--out", str(seeds)])
    assert res.exit_code == 0, res.output
    assert len(list(seeds.glob("*.png"))) == 3
    res = runner.invoke(main, ["eval", "--pred", str(seeds), "--gt", str(dataset / "gt")])
    assert res.exit_code == 0, res.output
    out = json.loads(res.output)
    assert 0 <= out["mean_iou"] <= 1 and out["per_class"]


def test_config_errors(dataset, tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["train-prompts", "--data", str(dataset), "--out", str(tmp_path / "s.bin"),
                               "--set", "no_such_key=1"])
    assert res.exit_code != 0 and "invalid config" in res.output
    res = runner.invoke(main, ["train-prompts", "--data", str(dataset), "--out", str(tmp_path / "s.bin"),
                               "--set", "epochs"])
    assert res.exit_code != 0


def test_refine_with_exact_scores_recovers_ground_truth(dataset, tmp_path):
    _, scenes = synth.read_dataset(dataset)
    scores = tmp_path / "scores"
    scores.mkdir()
    for sid, scene in scenes:
        onehot = np.stack([scene.gt.labels == c + 1 for c in scene.present]).astype(np.float32)
        codecs.write_tensor(scores / f"{sid}.bin", onehot, class_ids=scene.present)
    out = tmp_path / "refined"
    res = CliRunner().invoke(main, ["refine", "--scores", str(scores), "--masks", str(dataset), "--out", str(out)])
    assert res.exit_code == 0, res.output
    for sid, scene in scenes:
        assert np.array_equal(codecs.read_seed(out / f"{sid}.png").labels, scene.gt.labels)
    res = CliRunner().invoke(main, ["eval", "--pred", str(out), "--gt", str(dataset / "gt"), "--num-classes", "4"])
    assert json.loads(res.output)["mean_iou"] == 1.0


def test_eval_reports_missing_predictions(dataset, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    res = CliRunner().invoke(main, ["eval", "--pred", str(empty), "--gt", str(dataset / "gt")])
    assert res.exit_code != 0 and "no prediction" in res.output
