import logging
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from app.backend.config.config import EvalConfig
from app.backend.exceptions import ReportError
from app.backend.schemas import Detection, EvalReport, GroundTruthInstance, Task, TaskReport, group_by_video


logger = logging.getLogger(__name__)

TASKS: Tuple[Task, ...] = ("verb", "noun", "action")
Span = Tuple[float, float]


def temporal_iou(a: Span, b: Span) -> float:
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def rank_detections(detections: Iterable[Detection]) -> List[Detection]:
    """Descending intensity; ties broken by earlier start, then video id."""
    return sorted(detections, key=lambda d: (-d.intensity, d.t_start, d.video_id))


def _precision_envelope_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[Tuple[str, Span]],
                     theta: float) -> np.ndarray:
    """
    Greedy rank-order matching. Each detection takes the unmatched ground truth
    of its video with the highest IoU when that IoU is >= theta.

    Returns:
        1/0 true-positive flags in detection order.
    """
    by_video: Dict[str, List[int]] = {}
    for i, (video_id, _) in enumerate(ground_truth):
        by_video.setdefault(video_id, []).append(i)
    matched = np.zeros(len(ground_truth), dtype=bool)
    tp = np.zeros(len(detections))
    for rank, det in enumerate(detections):
        best_iou, best = -1.0, -1
        for g in by_video.get(det.video_id, []):
            if matched[g]:
                continue
            iou = temporal_iou((det.t_start, det.t_end), ground_truth[g][1])
            if iou > best_iou:
                best_iou, best = iou, g
        if best >= 0 and best_iou >= theta:
            matched[best] = True
            tp[rank] = 1.0
    return tp


def average_precision(detections: Sequence[Detection], ground_truth: Sequence[Tuple[str, Span]], theta: float,
                      interpolation: Literal["none", "envelope"] = "none") -> Optional[float]:
    """
    AP of one class. `detections` must already be ranked (see rank_detections).

    Args:
        detections: Ranked detections of the class.
        ground_truth: (video_id, (t_start, t_end)) instances of the class.
        theta: IoU needed for a match.
        interpolation: "none" sums precision at true-positive ranks and divides
            by the number of ground truths; "envelope" integrates the monotone
            precision envelope over recall. Only "envelope" keeps AP unchanged
            when every video is evaluated twice; "none" can shift when the
            duplicated ranks interleave hits and misses.
    Returns:
        AP, or None when the class has no ground truth.
    """
    if not ground_truth:
        return None
    if not detections:
        return 0.0
    tp = match_detections(detections, ground_truth, theta)
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    if interpolation == "envelope":
        return _precision_envelope_ap(precision, cum_tp / len(ground_truth))
    return float(np.sum(precision[tp == 1.0]) / len(ground_truth))


def action_class(verb: int, noun: int, c_noun: int) -> int:
    return verb * c_noun + noun


def pair_actions(verb_detections: Sequence[Detection], noun_detections: Sequence[Detection], c_noun: int,
                 config: Optional[EvalConfig] = None) -> List[Detection]:
    """
    Combines verb and noun detections of the same video whose spans overlap by
    at least `action_iou` into action detections with class (verb, noun) and
    intensity v.intensity * n.intensity. The span is the intersection or, with
    `action_pairing = verb_span`, the verb's span.
    """
    config = config or EvalConfig()
    nouns_by_video = group_by_video(noun_detections)
    actions: List[Detection] = []
    for v in verb_detections:
        for n in nouns_by_video.get(v.video_id, []):
            if temporal_iou((v.t_start, v.t_end), (n.t_start, n.t_end)) < config.action_iou:
                continue
            if config.action_pairing == "verb_span":
                start, end = v.t_start, v.t_end
            else:
                start, end = max(v.t_start, n.t_start), min(v.t_end, n.t_end)
            actions.append(Detection(video_id=v.video_id, t_start=start, t_end=end, task="action",
                                     class_=action_class(v.class_, n.class_, c_noun),
                                     intensity=v.intensity * n.intensity))
    return actions


def _gt_class(g: GroundTruthInstance, task: Task, c_noun: int) -> int:
    if task == "verb":
        return g.verb
    if task == "noun":
        return g.noun
    return action_class(g.verb, g.noun, c_noun)


def _class_name(cls_idx: int, task: Task, c_noun: int) -> str:
    if task == "action":
        return f"{cls_idx // c_noun}-{cls_idx % c_noun}"
    return str(cls_idx)


def evaluate(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthInstance],
             config: Optional[EvalConfig] = None, c_noun: Optional[int] = None) -> EvalReport:
    """
    Fills per-class AP, mAP per IoU threshold and their average for verb, noun
    and action. Action detections are taken from the input when present,
    otherwise paired from the verb and noun detections.

    Args:
        detections: Detections of any tasks and videos.
        ground_truth: Instances to score against.
        config: IoU thresholds, pairing and AP rule.
        c_noun: Noun class count for action class ids; inferred when omitted.
    Returns:
        The report; classes without ground truth are left out of every mean.
    """
    config = config or EvalConfig()
    if not ground_truth:
        raise ReportError("No ground truth to evaluate against")
    if c_noun is None:
        c_noun = 1 + max([g.noun for g in ground_truth] +
                         [d.class_ for d in detections if d.task == "noun"])

    by_task: Dict[Task, List[Detection]] = {t: [] for t in TASKS}
    for det in detections:
        by_task[det.task].append(det)
    if not by_task["action"]:
        by_task["action"] = pair_actions(by_task["verb"], by_task["noun"], c_noun, config)

    tasks: Dict[str, TaskReport] = {}
    for task in TASKS:
        gt_by_class: Dict[int, List[Tuple[str, Span]]] = {}
        for g in ground_truth:
            gt_by_class.setdefault(_gt_class(g, task, c_noun), []).append((g.video_id, (g.t_start, g.t_end)))
        det_by_class: Dict[int, List[Detection]] = {}
        for det in by_task[task]:
            det_by_class.setdefault(det.class_, []).append(det)

        per_class: Dict[str, List[float]] = {}
        for cls_idx in sorted(gt_by_class):
            ranked = rank_detections(det_by_class.get(cls_idx, []))
            aps = [average_precision(ranked, gt_by_class[cls_idx], theta, config.ap_interpolation)
                   for theta in config.iou_thresholds]
            per_class[_class_name(cls_idx, task, c_noun)] = [float(ap) for ap in aps if ap is not None]
        columns = np.array(list(per_class.values()))
        mean_ap = columns.mean(axis=0).tolist()
        tasks[task] = TaskReport(task=task, per_class=per_class, mean_ap=mean_ap,
                                 avg=float(np.mean(mean_ap)))
        logger.info(f"{task}: mAP {' '.join(f'{m:.4f}' for m in mean_ap)} avg {tasks[task].avg:.4f}")
    return EvalReport(iou_thresholds=list(config.iou_thresholds), tasks=tasks)
