"""Frame-level average precision and dataset evaluation."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ModelConfig
from .data import VideoSample, expand_scores_to_frames
from .errors import ContractError, DimensionError, UndefinedMetricError
from .model import ModelParams, predict


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Non-interpolated AP over a ranking by descending score.

    Equal scores form one block: every item of a tied block is counted at
    the block's end, so AP is the sum over distinct thresholds of
    precision x recall increment. The result depends only on the ranking
    induced by ``scores`` and not on input order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise DimensionError(f"average_precision: {s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("average_precision: labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average_precision is undefined without positive labels")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order].astype(np.int64)
    tp = np.cumsum(y)
    # last index of each tied block
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp_at = tp[ends]
    gained = np.diff(np.r_[0, tp_at])
    precision = tp_at / (ends + 1)
    return float(np.sum(gained * precision) / n_pos)


@dataclass
class EvalReport:
    frame_ap: float
    num_positive_frames: int
    num_frames: int
    score_csvs: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def write_score_csv(path: str | Path, frame_scores: Sequence[float], frame_labels: Sequence[int] | None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if frame_labels is None:
            w.writerow(["frame_index", "score"])
            for i, sc in enumerate(frame_scores):
                w.writerow([i, repr(float(sc))])
        else:
            w.writerow(["frame_index", "score", "label"])
            for i, (sc, lab) in enumerate(zip(frame_scores, frame_labels)):
                w.writerow([i, repr(float(sc)), int(lab)])


def evaluate(params: ModelParams, cfg: ModelConfig, samples: Sequence[VideoSample],
             out_dir: str | Path | None = None) -> EvalReport:
    """Global frame-level AP over all videos; optional per-video CSVs in ``out_dir``."""
    all_scores: list[float] = []
    all_labels: list[int] = []
    csvs = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.frame_labels is None:
            raise ContractError(f"video {s.id}: evaluation needs frame-level labels")
        fps = s.frames_per_snippet
        frame_scores = expand_scores_to_frames(predict(s, params, cfg), fps)
        all_scores.extend(frame_scores)
        all_labels.extend(int(v) for v in s.frame_labels)
        if out_dir is not None:
            path = Path(out_dir) / f"{s.id}_scores.csv"
            write_score_csv(path, frame_scores, s.frame_labels)
            csvs.append(str(path))
    ap = average_precision(all_scores, all_labels)
    return EvalReport(ap, int(sum(all_labels)), len(all_labels), csvs)
