import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Type, TypeVar, Union

import pandas as pd
from pydantic import BaseModel, ValidationError

from app.backend.exceptions import DataIOError, FormatError
from app.backend.schemas import Detection, EvalReport, GroundTruthInstance, NarrationAnnotation
from app.backend.storage.binary import write_atomic


logger = logging.getLogger(__name__)

ANNOTATION_COLUMNS = ["video_id", "time_sec", "verb", "noun"]
GROUND_TRUTH_COLUMNS = ["video_id", "t_start", "t_end", "verb", "noun"]
LOG_COLUMNS = ["step", "loss", "val_action_map"]

PathLike = Union[str, Path]
R = TypeVar("R", bound=BaseModel)


def _read_csv(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataIOError("CSV file not found", path=str(path))
    try:
        df = pd.read_csv(path, dtype={"video_id": str}, encoding="utf-8", float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"unreadable CSV: {e}", path=str(path)) from e
    if list(df.columns) != list(columns):
        raise FormatError(f"expected header {','.join(columns)}, got {','.join(map(str, df.columns))}",
                          path=str(path))
    return df


def _to_records(df: pd.DataFrame, model: Type[R], rename: dict, path: PathLike) -> List[R]:
    records: List[R] = []
    for row_no, row in enumerate(df.rename(columns=rename).to_dict(orient="records"), start=2):
        try:
            records.append(model.model_validate(row))
        except ValidationError as e:
            raise FormatError(f"line {row_no}: {e.errors()[0]['msg']}", path=str(path)) from e
    return records


def _csv_text(rows: Iterable[Tuple], columns: Sequence[str]) -> str:
    return pd.DataFrame(list(rows), columns=list(columns)).to_csv(index=False, lineterminator="\n")


def read_annotations(path: PathLike) -> List[NarrationAnnotation]:
    df = _read_csv(path, ANNOTATION_COLUMNS)
    records = _to_records(df, NarrationAnnotation, {"time_sec": "time"}, path)
    logger.info(f"Read {len(records)} narration annotations from {path}")
    return records


def write_annotations(path: PathLike, annotations: Iterable[NarrationAnnotation]) -> Path:
    rows = ((a.video_id, a.time, a.verb, a.noun) for a in annotations)
    return write_atomic(path, _csv_text(rows, ANNOTATION_COLUMNS))


def read_ground_truth(path: PathLike) -> List[GroundTruthInstance]:
    df = _read_csv(path, GROUND_TRUTH_COLUMNS)
    records = _to_records(df, GroundTruthInstance, {}, path)
    logger.info(f"Read {len(records)} ground-truth instances from {path}")
    return records


def write_ground_truth(path: PathLike, instances: Iterable[GroundTruthInstance]) -> Path:
    rows = ((g.video_id, g.t_start, g.t_end, g.verb, g.noun) for g in instances)
    return write_atomic(path, _csv_text(rows, GROUND_TRUTH_COLUMNS))


def detections_to_jsonl(detections: Iterable[Detection]) -> str:
    return "".join(d.model_dump_json(by_alias=True) + "\n" for d in detections)


def write_detections(path: PathLike, detections: Iterable[Detection]) -> Path:
    return write_atomic(path, detections_to_jsonl(detections))


def read_detections(path: PathLike) -> List[Detection]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError("Detection file not found", path=str(path))
    detections: List[Detection] = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            detections.append(Detection.model_validate_json(line))
        except ValidationError as e:
            raise FormatError(f"line {line_no}: {e.errors()[0]['msg']}", path=str(path)) from e
    logger.info(f"Read {len(detections)} detections from {path}")
    return detections


def write_training_log(path: PathLike, rows: Iterable[Tuple[int, float, Optional[float]]]) -> Path:
    return write_atomic(path, _csv_text(rows, LOG_COLUMNS))


def read_training_log(path: PathLike) -> pd.DataFrame:
    return _read_csv(path, LOG_COLUMNS)


def report_table(report: EvalReport, run: Optional[str] = None) -> pd.DataFrame:
    """Rows (task, class | ALL), columns @θ for each IoU threshold, then Avg."""
    columns = [f"@{t:g}" for t in report.iou_thresholds]
    rows = []
    for task, task_report in report.tasks.items():
        rows.append([task, "ALL", *task_report.mean_ap, task_report.avg])
        for cls_name, aps in task_report.per_class.items():
            rows.append([task, cls_name, *aps, sum(aps) / len(aps)])
    df = pd.DataFrame(rows, columns=["task", "class", *columns, "Avg"])
    if run is not None:
        df.insert(0, "run", run)
    return df


def write_report(prefix: PathLike, report: EvalReport) -> Tuple[Path, Path]:
    prefix = Path(prefix)
    csv_path = write_atomic(prefix.with_name(prefix.name + ".csv"),
                            report_table(report).to_csv(index=False, lineterminator="\n"))
    json_path = write_atomic(prefix.with_name(prefix.name + ".json"), report.model_dump_json(indent=2) + "\n")
    logger.info(f"Report written to {csv_path} and {json_path}")
    return csv_path, json_path


def write_frame(path: PathLike, df: pd.DataFrame) -> Path:
    return write_atomic(path, df.to_csv(index=False, lineterminator="\n"))
