import json

import numpy as np
import pytest

from app.backend.config.config import TrainConfig
from app.backend.features.ingest import load_features, write_features
from app.backend.model.checkpoint import load_checkpoint
from app.backend.postprocess.postprocess import load_scores
from app.backend.routers.cli import run
from app.backend.storage.tables import read_detections, read_ground_truth, read_training_log, write_detections
from app.backend.synth.synthgen import ground_truth_as_detections

SYNTH = """\
# desk-sized synthetic run
n_videos = 5
video_len_frames = 30
fps = 2.0
c_verb = 3
c_noun = 3
rgb_dim = 4
flow_dim = 4
audio_dim = 2
mean_action_len = 5
gap_len = 2
emission_noise_sd = 0.3
seed = 2
"""

TRAIN = """\
max_steps = 3
batch_size = 4
d = 4
eval_every = 2
learning_rate = 0.01
val_fraction = 0.4
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "synth.cfg").write_text(SYNTH)
    (tmp_path / "train.cfg").write_text(TRAIN)
    assert run(["generate", "--config", str(tmp_path / "synth.cfg"), "--out", str(tmp_path / "data")]) == 0
    return tmp_path


def data_keys(root, checkpoint, with_ground_truth=True):
    data = root / "data"
    keys = ["--set", f"features_dir={data / 'features'}", "--set", f"annotations_path={data / 'annotations.csv'}",
            "--set", f"checkpoint_path={checkpoint}"]
    if with_ground_truth:
        keys += ["--set", f"ground_truth_path={data / 'ground_truth.csv'}"]
    return keys


def pipeline(root, out):
    out.mkdir()
    data = root / "data"
    ckpt = out / "model.nwsm"
    assert run(["train", "--config", str(root / "train.cfg"), *data_keys(root, ckpt)]) == 0
    assert run(["infer", "--checkpoint", str(ckpt), "--features", str(data / "features"),
                "--out", str(out / "scores.nwss")]) == 0
    assert run(["postprocess", "--scores", str(out / "scores.nwss"), "--out", str(out / "dets.jsonl")]) == 0
    assert run(["eval", "--detections", str(out / "dets.jsonl"), "--ground-truth", str(data / "ground_truth.csv"),
                "--out", str(out / "report")]) == 0
    return sorted(p for p in out.iterdir())


def test_generate_writes_dataset(workspace):
    data = workspace / "data"
    assert sorted(p.name for p in (data / "features").iterdir()) == [f"vid{i:04d}.nwsd" for i in range(5)]
    for name in ("annotations.csv", "ground_truth.csv", "manifest.txt"):
        assert (data / name).is_file()


def test_eval_on_oracle_detections(workspace):
    data = workspace / "data"
    truth = read_ground_truth(data / "ground_truth.csv")
    write_detections(workspace / "oracle.jsonl", ground_truth_as_detections(truth))
    code = run(["eval", "--detections", str(workspace / "oracle.jsonl"),
                "--ground-truth", str(data / "ground_truth.csv"), "--out", str(workspace / "oracle")])
    assert code == 0
    report = json.loads((workspace / "oracle.json").read_text())
    for task in report["tasks"].values():
        assert task["mean_ap"] == [1.0] * 5 and task["avg"] == 1.0
    assert (workspace / "oracle.csv").read_text().splitlines()[0] == "task,class,@0.1,@0.2,@0.3,@0.4,@0.5,Avg"


def test_untrained_checkpoint_gives_valid_scores(workspace):
    ckpt = workspace / "init.nwsm"
    assert run(["train", "--set", "max_steps=0", "--set", "d=4", "--set", "c_verb=3", "--set", "c_noun=3",
                *data_keys(workspace, ckpt)]) == 0
    assert (workspace / "init.nwsm.log.csv").read_text().splitlines() == ["step,loss,val_action_map"]
    assert run(["infer", "--checkpoint", str(ckpt), "--features", str(workspace / "data" / "features"),
                "--out", str(workspace / "s.nwss"), "--threads", "2"]) == 0
    scores = load_scores(workspace / "s.nwss")
    assert [s.video_id for s in scores] == [f"vid{i:04d}" for i in range(5)]
    for video in scores:
        assert video.heads["verb"].shape == (30, 3)
        assert abs(video.heads["noun"].sum(axis=1) - 1.0).max() < 1e-12


def test_full_pipeline_is_reproducible(workspace):
    first = pipeline(workspace, workspace / "run1")
    second = pipeline(workspace, workspace / "run2")
    names = [p.name for p in first]
    for expected in ("model.nwsm", "model.nwsm.log.csv", "model.nwsm.split.txt", "scores.nwss", "dets.jsonl",
                     "report.csv", "report.json"):
        assert expected in names
    assert names == [p.name for p in second]
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes(), a.name
    assert all(d.task in ("verb", "noun") for d in read_detections(workspace / "run1" / "dets.jsonl"))


def test_training_log_records_every_step(workspace):
    ckpt = workspace / "m.nwsm"
    assert run(["train", "--config", str(workspace / "train.cfg"), *data_keys(workspace, ckpt)]) == 0
    log = read_training_log(workspace / "m.nwsm.log.csv")
    assert log["step"].tolist() == [1, 2, 3]
    assert log["loss"].map(np.isfinite).all()
    assert log["val_action_map"].isna().tolist() == [True, False, False]
    assert log["val_action_map"].dropna().between(0.0, 1.0).all()


def test_single_modality_model_runs_end_to_end(workspace):
    data = workspace / "data"
    ckpt = workspace / "rgb.nwsm"
    assert run(["train", "--config", str(workspace / "train.cfg"), "--set", "modalities=rgb",
                *data_keys(workspace, ckpt)]) == 0
    params = load_checkpoint(ckpt)
    assert params.modalities == ("rgb",) and params.din == 4
    assert run(["infer", "--checkpoint", str(ckpt), "--features", str(data / "features"),
                "--out", str(workspace / "rgb.nwss")]) == 0
    scores = load_scores(workspace / "rgb.nwss")
    assert all(video.heads["verb"].shape == (30, 3) for video in scores)
    assert run(["postprocess", "--scores", str(workspace / "rgb.nwss"), "--out", str(workspace / "rgb.jsonl")]) == 0
    assert run(["eval", "--detections", str(workspace / "rgb.jsonl"), "--ground-truth", str(data / "ground_truth.csv"),
                "--out", str(workspace / "rgb")]) == 0
    report = json.loads((workspace / "rgb.json").read_text())
    assert set(report["tasks"]) == {"verb", "noun", "action"}


def test_report_compares_checkpoints(workspace):
    pipeline(workspace, workspace / "run")
    ckpt = workspace / "run" / "model.nwsm"
    code = run(["report", "--run", f"ours={ckpt}", "--run", f"again={ckpt}",
                "--features", str(workspace / "data" / "features"),
                "--ground-truth", str(workspace / "data" / "ground_truth.csv"),
                "--videos", str(workspace / "run" / "model.nwsm.split.txt"),
                "--out", str(workspace / "cmp"), "--top-k", "2"])
    assert code == 0
    rows = (workspace / "cmp.csv").read_text().splitlines()
    assert rows[0] == "run,task,@0.1,@0.2,@0.3,@0.4,@0.5,Avg"
    assert len(rows) == 1 + 2 * 3
    assert rows[1].split(",")[1:] == rows[4].split(",")[1:]
    report = json.loads((workspace / "cmp.json").read_text())
    assert sorted(report) == ["again", "ours"]
    assert (workspace / "cmp.topk.csv").is_file() and (workspace / "cmp.classes.csv").is_file()


def test_unknown_config_key(workspace, caplog):
    code = run(["train", "--set", "learning_rat=0.1", *data_keys(workspace, workspace / "m.nwsm")])
    assert code == 2
    assert "learning_rat" in caplog.text
    assert not (workspace / "m.nwsm").exists()


def test_invalid_thread_count(workspace):
    assert run(["generate", "--out", str(workspace / "x"), "--threads", "0"]) == 2


def test_missing_input_file(workspace, caplog):
    missing = workspace / "absent.jsonl"
    code = run(["eval", "--detections", str(missing), "--ground-truth", str(workspace / "data" / "ground_truth.csv"),
                "--out", str(workspace / "r")])
    assert code == 3
    assert str(missing) in caplog.text
    assert not (workspace / "r.csv").exists() and not (workspace / "r.json").exists()


def test_failed_command_removes_its_outputs(workspace):
    corrupt = workspace / "bad.nwss"
    corrupt.write_bytes(b"NWSS\x01\x00\x00\x00\x05")
    stale = workspace / "dets.jsonl"
    stale.write_text("stale\n")
    assert run(["postprocess", "--scores", str(corrupt), "--out", str(stale)]) == 3
    assert not stale.exists()


def test_non_finite_features_exit_with_numeric_code(workspace, caplog):
    ckpt = workspace / "init.nwsm"
    assert run(["train", "--set", "max_steps=0", "--set", "d=4", *data_keys(workspace, ckpt)]) == 0
    features = workspace / "data" / "features"
    video = load_features(features / "vid0000.nwsd")
    tracks = {m: t.data.copy() for m, t in video.tracks.items()}
    tracks["rgb"][3, 0] = np.nan
    write_features(features / "vid0000.nwsd", video.video_id, video.fps, tracks)
    out = workspace / "s.nwss"
    assert run(["infer", "--checkpoint", str(ckpt), "--features", str(features), "--out", str(out)]) == 4
    assert "non-finite" in caplog.text
    assert not out.exists()


def test_fully_supervised_training_needs_ground_truth(workspace):
    keys = data_keys(workspace, workspace / "f.nwsm", with_ground_truth=False)
    assert run(["train", "--set", "variant=ful", "--set", "max_steps=1", *keys]) == 2
    assert not (workspace / "f.nwsm").exists()


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exit_info:
        run(["train", "--help"])
    assert exit_info.value.code == 0
    out = capsys.readouterr().out
    for key in TrainConfig.model_fields:
        assert f"  {key} = " in out
    assert "learning_rate = 1e-05" in out
    assert "nms_iou = 0.4" in out
    assert "iou_thresholds = 0.1,0.2,0.3,0.4,0.5" in out
