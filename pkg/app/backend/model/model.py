"""
Detection heads on a shared Conv1D trunk.

- ours: class-aware attention MIL (per-class attention rows, narrated row selected)
- cls_agno: a single attention row shared by every class
- narr_bas / ful: frame-level classifier with an appended background class
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from app.backend.config.config import Modality, Variant
from app.backend.exceptions import ConfigError, ShapeError
from app.backend.features.ingest import FusedSequence
from app.backend.kernel import numkernel as nk
from app.backend.kernel.numkernel import Matrix, Node, Tape
from app.backend.schemas import HEADS, Clip, ClipLabel, Head


logger = logging.getLogger(__name__)

WEAK_VARIANTS: Tuple[Variant, ...] = ("ours", "cls_agno")
SUPERVISED_VARIANTS: Tuple[Variant, ...] = ("narr_bas", "ful")


@dataclass
class ModelParams:
    """Named parameter blocks plus the metadata needed to rebuild the heads."""
    variant: Variant
    c_verb: int
    c_noun: int
    d: int
    din: int
    shared_trunk: bool
    modalities: Tuple[Modality, ...]
    blocks: Dict[str, Matrix] = field(default_factory=dict)

    @property
    def supervised(self) -> bool:
        return self.variant in SUPERVISED_VARIANTS

    def n_classes(self, head: Head) -> int:
        return self.c_verb if head == "verb" else self.c_noun

    def trunk(self, head: Head) -> str:
        return "conv" if self.shared_trunk else f"{head}.conv"

    def expected_shapes(self) -> Dict[str, Tuple[int, int]]:
        shapes: Dict[str, Tuple[int, int]] = {}
        trunks = ["conv"] if self.shared_trunk else [f"{h}.conv" for h in HEADS]
        for prefix in trunks:
            shapes[f"{prefix}.kernel"] = (nk.CONV_WIDTH * self.din, self.d)
            shapes[f"{prefix}.bias"] = (1, self.d)
        for head in HEADS:
            c = self.n_classes(head)
            if self.variant == "ours":
                shapes[f"{head}.w1"] = (c, self.d)
            elif self.variant == "cls_agno":
                shapes[f"{head}.w1"] = (1, self.d)
            shapes[f"{head}.w2"] = (self.d, c + 1 if self.supervised else c)
        return shapes

    def validate(self) -> None:
        expected = self.expected_shapes()
        if list(expected) != list(self.blocks):
            raise ShapeError(f"parameter blocks {list(self.blocks)} != expected {list(expected)}")
        for name, shape in expected.items():
            if self.blocks[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.blocks[name].shape}, expected {shape}")

    def copy(self) -> "ModelParams":
        return ModelParams(self.variant, self.c_verb, self.c_noun, self.d, self.din, self.shared_trunk,
                           self.modalities, {k: v.copy() for k, v in self.blocks.items()})


@dataclass
class DropoutState:
    """Training-mode dropout: one generator, inverted-dropout rescaling by 1/(1-p)."""
    rng: np.random.Generator
    attention_p: float = 0.5
    conv_p: float = 0.5

    def mask(self, shape: Tuple[int, int], p: float) -> Matrix:
        keep = self.rng.random(shape) >= p
        return keep / (1.0 - p)


@dataclass
class ClipForward:
    A_full: Matrix
    A_sel: Matrix
    D: Matrix
    pooled: Matrix
    P: Matrix
    loss: float
    tape: Tape
    loss_node: Node

    def backward(self) -> Dict[str, Matrix]:
        return self.tape.backward(self.loss_node)


@dataclass
class SupervisedForward:
    D: Matrix
    loss: float
    tape: Tape
    loss_node: Node

    def backward(self) -> Dict[str, Matrix]:
        return self.tape.backward(self.loss_node)


@dataclass(frozen=True)
class FrameUnit:
    """A stretch of frames with one label per frame and head (supervised baselines)."""
    video_id: str
    start_frame: int
    end_frame: int
    verb_labels: npt.NDArray[np.int64]
    noun_labels: npt.NDArray[np.int64]
    features: Optional[FusedSequence] = None

    def labels(self, head: Head) -> npt.NDArray[np.int64]:
        return self.verb_labels if head == "verb" else self.noun_labels


def attention(F: Matrix, W1: Matrix) -> Matrix:
    """C x L map of sigmoid(W1 F^T)."""
    if F.shape[1] != W1.shape[1]:
        raise ShapeError(f"attention: frames {F.shape} vs embeddings {W1.shape}")
    return nk.sigmoid(W1 @ F.T)


def select_row(A_full: Matrix, c: int) -> Matrix:
    if not 0 <= c < A_full.shape[0]:
        raise ShapeError(f"class {c} outside [0, {A_full.shape[0]})")
    return A_full[c:c + 1].copy()


def frame_scores(F: Matrix, W2: Matrix) -> Matrix:
    """L x C per-frame class distribution."""
    return nk.softmax_rows(nk.matmul(F, W2))


def pool(A_sel: Matrix, F: Matrix) -> Matrix:
    return nk.weighted_pool(A_sel, F)


def clip_predict(pooled: Matrix, W2: Matrix) -> Matrix:
    return nk.softmax_rows(nk.matmul(pooled, W2))


def clip_loss(P: Matrix, y: ClipLabel) -> float:
    """-log P[c], with P floored at 1e-12."""
    return nk.nll(nk.as_matrix(P), [y.index])


def _leaves(tape: Tape, params: ModelParams) -> Dict[str, Node]:
    return {name: tape.leaf(value, name) for name, value in params.blocks.items()}


def _trunk(tape: Tape, x: Node, leaves: Dict[str, Node], prefix: str,
           dropout: Optional[DropoutState]) -> Node:
    h = tape.conv1d(x, leaves[f"{prefix}.kernel"], leaves[f"{prefix}.bias"])
    if dropout is not None and dropout.conv_p > 0:
        h = tape.mul_const(h, dropout.mask(h.shape, dropout.conv_p))
    return h


def _weak_head(tape: Tape, h: Node, leaves: Dict[str, Node], head: Head, label: ClipLabel,
               class_aware: bool, dropout: Optional[DropoutState]) -> Tuple[Node, Dict[str, Matrix]]:
    w1, w2 = leaves[f"{head}.w1"], leaves[f"{head}.w2"]
    a_full = tape.sigmoid(tape.matmul(w1, tape.transpose(h)))
    a_sel = tape.select_row(a_full, label.index if class_aware else 0)
    if dropout is not None and dropout.attention_p > 0:
        a_sel = tape.mul_const(a_sel, dropout.mask(a_sel.shape, dropout.attention_p))
    d = tape.softmax_rows(tape.matmul(h, w2))
    pooled = tape.weighted_pool(a_sel, h)
    p = tape.softmax_rows(tape.matmul(pooled, w2))
    loss = tape.nll(p, [label.index])
    parts = {"A_full": a_full.value, "A_sel": a_sel.value, "D": d.value, "pooled": pooled.value, "P": p.value}
    return loss, parts


def _clip_frames(clip: Clip) -> Matrix:
    if clip.features is None:
        raise ConfigError(f"clip {clip.video_id}[{clip.start_frame},{clip.end_frame}) has no fused features")
    return clip.features.window(clip.start_frame, clip.end_frame)


def _weak_forward(clip: Clip, params: ModelParams, head: Head, class_aware: bool,
                  dropout: Optional[DropoutState]) -> ClipForward:
    label = clip.label(head, params.n_classes(head))
    tape = Tape()
    leaves = _leaves(tape, params)
    x = tape.constant(_clip_frames(clip))
    h = _trunk(tape, x, leaves, params.trunk(head), dropout)
    loss, parts = _weak_head(tape, h, leaves, head, label, class_aware, dropout)
    return ClipForward(loss=float(loss.value[0, 0]), tape=tape, loss_node=loss, **parts)


def forward(clip: Clip, params: ModelParams, head: Head,
            dropout: Optional[DropoutState] = None) -> ClipForward:
    """
    Class-aware pipeline for one clip and head: Conv1D trunk, per-class
    attention, narrated-row selection, attention pooling, shared classifier,
    cross-entropy. `dropout=None` is inference mode.
    """
    return _weak_forward(clip, params, head, True, dropout)


def forward_agnostic(clip: Clip, params: ModelParams, head: Head,
                     dropout: Optional[DropoutState] = None) -> ClipForward:
    """Same pipeline with a single attention row that ignores the clip label."""
    if params.blocks[f"{head}.w1"].shape[0] != 1:
        raise ShapeError(f"class-agnostic head expects a 1 x d attention vector for {head}")
    return _weak_forward(clip, params, head, False, dropout)


def forward_supervised(frames: Matrix, frame_labels: Sequence[int], params: ModelParams, head: Head,
                       dropout: Optional[DropoutState] = None) -> SupervisedForward:
    """
    Frame-level baseline: per-frame softmax over C classes plus background
    (index C), trained with the mean per-frame cross-entropy.
    """
    n_out = params.n_classes(head) + 1
    labels = np.asarray(frame_labels, dtype=np.int64)
    if labels.shape != (frames.shape[0],):
        raise ShapeError(f"{labels.shape[0]} labels for {frames.shape[0]} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= n_out):
        raise ConfigError(f"frame label outside [0, {n_out})", key=head)
    tape = Tape()
    leaves = _leaves(tape, params)
    h = _trunk(tape, tape.constant(frames), leaves, params.trunk(head), dropout)
    d = tape.softmax_rows(tape.matmul(h, leaves[f"{head}.w2"]))
    loss = tape.nll(d, labels)
    return SupervisedForward(D=d.value, loss=float(loss.value[0, 0]), tape=tape, loss_node=loss)


def weak_objective(clip: Clip, params: ModelParams,
                   dropout: Optional[DropoutState] = None) -> Tuple[float, Dict[str, Matrix]]:
    """Summed verb + noun loss of one clip and its gradient (one tape, shared trunk computed once)."""
    class_aware = params.variant == "ours"
    tape = Tape()
    leaves = _leaves(tape, params)
    x = tape.constant(_clip_frames(clip))
    trunks: Dict[str, Node] = {}
    total: Optional[Node] = None
    for head in HEADS:
        prefix = params.trunk(head)
        if prefix not in trunks:
            trunks[prefix] = _trunk(tape, x, leaves, prefix, dropout)
        loss, _ = _weak_head(tape, trunks[prefix], leaves, head, clip.label(head, params.n_classes(head)),
                             class_aware, dropout)
        total = loss if total is None else tape.add(total, loss)
    assert total is not None
    return float(total.value[0, 0]), tape.backward(total)


def supervised_objective(unit: FrameUnit, params: ModelParams,
                         dropout: Optional[DropoutState] = None) -> Tuple[float, Dict[str, Matrix]]:
    if unit.features is None:
        raise ConfigError(f"frame unit {unit.video_id} has no fused features")
    frames = unit.features.window(unit.start_frame, unit.end_frame)
    tape = Tape()
    leaves = _leaves(tape, params)
    x = tape.constant(frames)
    trunks: Dict[str, Node] = {}
    total: Optional[Node] = None
    for head in HEADS:
        prefix = params.trunk(head)
        if prefix not in trunks:
            trunks[prefix] = _trunk(tape, x, leaves, prefix, dropout)
        d = tape.softmax_rows(tape.matmul(trunks[prefix], leaves[f"{head}.w2"]))
        loss = tape.nll(d, unit.labels(head))
        total = loss if total is None else tape.add(total, loss)
    assert total is not None
    return float(total.value[0, 0]), tape.backward(total)


def predict_scores(params: ModelParams, fused: FusedSequence) -> Dict[Head, Matrix]:
    """
    Per-frame class scores for a whole video in inference mode. Supervised
    variants drop their background column.
    """
    if fused.dim != params.din:
        raise ShapeError(f"video {fused.video_id} has {fused.dim} feature columns, model expects {params.din}")
    nk.check_finite(fused.data, f"{fused.video_id} features")
    scores: Dict[Head, Matrix] = {}
    trunks: Dict[str, Matrix] = {}
    for head in HEADS:
        prefix = params.trunk(head)
        if prefix not in trunks:
            trunks[prefix] = nk.conv1d(fused.data, params.blocks[f"{prefix}.kernel"],
                                       params.blocks[f"{prefix}.bias"])
        d = frame_scores(trunks[prefix], params.blocks[f"{head}.w2"])
        d = nk.check_finite(d, f"{fused.video_id} {head} scores")
        scores[head] = d[:, :params.n_classes(head)].copy() if params.supervised else d
    return scores
