import json

import pytest
from pydantic import ValidationError

from app.backend.exceptions import ConfigError, FormatError
from app.backend.schemas import (
    Clip,
    ClipLabel,
    Detection,
    GroundTruthInstance,
    NarrationAnnotation,
    VideoInfo,
    frames_to_seconds,
    seconds_to_frame,
    validate_dataset,
)
from app.backend.storage.tables import (
    read_annotations,
    read_detections,
    read_ground_truth,
    write_annotations,
    write_detections,
    write_ground_truth,
)


@pytest.mark.parametrize("frame,fps,expected", [(0, 25.0, 0.0), (30, 30.0, 1.0), (7, 4.0, 1.75)])
def test_frames_to_seconds(frame, fps, expected):
    assert frames_to_seconds(frame, fps) == expected


def test_non_positive_fps():
    with pytest.raises(ConfigError):
        frames_to_seconds(3, 0.0)
    with pytest.raises(ConfigError):
        seconds_to_frame(1.0, -1.0)


def test_seconds_to_frame_on_boundaries():
    assert seconds_to_frame(1.4, 5.0) == 7
    assert seconds_to_frame(0.2 * 3, 5.0) == 3


def ann(vid, t, verb=0, noun=0):
    return NarrationAnnotation(video_id=vid, time=t, verb=verb, noun=noun)


class TestValidateDataset:
    videos = {"a": VideoInfo(n_frames=10, fps=1.0)}

    def test_clean_input(self):
        assert validate_dataset([ann("a", 1.0), ann("a", 2.5)], self.videos, 2, 2) == []

    def test_past_end(self):
        violations = validate_dataset([ann("a", 1.0), ann("a", 10.0)], self.videos, 2, 2)
        assert [v.kind for v in violations] == ["past_end"]

    def test_duplicate_timestamps(self):
        violations = validate_dataset([ann("a", 3.0), ann("a", 3.0)], self.videos, 2, 2)
        assert [v.kind for v in violations] == ["unsorted"]

    def test_class_range_and_unknown_video(self):
        violations = validate_dataset([ann("a", 1.0, verb=2), ann("b", 1.0)], self.videos, 2, 2)
        assert sorted(v.kind for v in violations) == ["class_range", "unknown_video"]


def test_clip_label_validates_against_head_space():
    clip = Clip(video_id="a", start_frame=0, end_frame=4, verb=3, noun=1)
    assert clip.label("verb", 5).index == 3
    with pytest.raises(ConfigError):
        clip.label("verb", 3)
    assert list(ClipLabel(2, 4).vector) == [0.0, 0.0, 1.0, 0.0]


def test_records_reject_bad_spans():
    with pytest.raises(ValidationError):
        GroundTruthInstance(video_id="a", t_start=2.0, t_end=2.0, verb=0, noun=0)
    with pytest.raises(ValidationError):
        Detection(video_id="a", t_start=0.0, t_end=1.0, task="verb", class_=0, intensity=float("nan"))
    with pytest.raises(ValueError):
        Clip(video_id="a", start_frame=3, end_frame=3, verb=0, noun=0)


def test_csv_tables_round_trip(tmp_path):
    annotations = [ann("v1", 0.1, 1, 2), ann("v1", 2.0 / 3.0, 0, 4), ann("007", 5.5, 3, 3)]
    write_annotations(tmp_path / "ann.csv", annotations)
    assert read_annotations(tmp_path / "ann.csv") == annotations
    assert (tmp_path / "ann.csv").read_text().splitlines()[0] == "video_id,time_sec,verb,noun"

    gt = [GroundTruthInstance(video_id="v1", t_start=0.2, t_end=1.3, verb=1, noun=0)]
    write_ground_truth(tmp_path / "gt.csv", gt)
    assert read_ground_truth(tmp_path / "gt.csv") == gt


def test_detection_jsonl_uses_class_key(tmp_path):
    det = Detection(video_id="v1", t_start=0.5, t_end=1.5, task="noun", class_=2, intensity=0.25)
    write_detections(tmp_path / "d.jsonl", [det])
    line = (tmp_path / "d.jsonl").read_text().strip()
    assert json.loads(line) == {"video_id": "v1", "t_start": 0.5, "t_end": 1.5, "task": "noun",
                                "class": 2, "intensity": 0.25}
    assert read_detections(tmp_path / "d.jsonl") == [det]


def test_bad_csv_header(tmp_path):
    path = tmp_path / "ann.csv"
    path.write_text("video,time,verb,noun\na,1.0,0,0\n")
    with pytest.raises(FormatError):
        read_annotations(path)


def test_bad_csv_row_names_line(tmp_path):
    path = tmp_path / "gt.csv"
    path.write_text("video_id,t_start,t_end,verb,noun\na,1.0,0.5,0,0\n")
    with pytest.raises(FormatError, match="line 2"):
        read_ground_truth(path)
