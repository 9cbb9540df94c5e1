"""Language-to-video attention guidance.

The verifier's prefill attention is reduced to one score per video token: take
the rows of language (query) items against the columns of video (key) items,
average over every layer and head, then average over the language rows. Token
importance downstream keys entirely off these scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateScoresError, GuidanceError
from .model import AttentionCapture
from .sequence import MultimodalSequence, VideoLayout


@dataclass(frozen=True)
class GuidanceMatrix:
    """(n_language, n_video) attention mass, already averaged over layers/heads.

    Rows need not sum to one: language rows also attend to non-video keys.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise GuidanceError("guidance matrix must be 2-D")
        object.__setattr__(self, "values", values)

    @property
    def n_language(self) -> int:
        return self.values.shape[0]

    @property
    def n_video(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class GuidanceScores:
    """Per-video-token attention mass, indexed by flat layout index."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise GuidanceError("scores must be 1-D")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CumulativeProfile:
    """Cumulative attention mass against token fraction, tokens sorted by
    descending score. Starts at (0, 0), ends at (1, 1), concave in between."""

    token_fraction: np.ndarray
    attention_fraction: np.ndarray


def descending_order(values: np.ndarray) -> np.ndarray:
    """Indices sorting values descending; ties broken by ascending index."""
    values = np.asarray(values)
    return np.lexsort((np.arange(values.shape[0]), -values))


def extract_guidance(capture: AttentionCapture, seq: MultimodalSequence) -> GuidanceMatrix:
    """Average language-row/video-column attention over all layers and heads.

    The capture must come from a prefill of exactly this (unpruned) sequence.
    """
    if capture.n_positions != len(seq):
        raise GuidanceError(
            f"capture covers {capture.n_positions} positions, sequence has {len(seq)}"
        )
    if seq.n_language == 0:
        raise GuidanceError("guidance is undefined without language query rows")
    if seq.is_pruned:
        raise GuidanceError("guidance is extracted from the unpruned prompt")
    n_video = seq.n_video
    block = capture.probs[:, :, n_video:, :n_video]
    return GuidanceMatrix(block.mean(axis=(0, 1), dtype=np.float64))


def score_tokens(matrix: GuidanceMatrix) -> GuidanceScores:
    """Column means: average attention each video token received."""
    if matrix.n_language < 1:
        raise GuidanceError("at least one language row required")
    return GuidanceScores(matrix.values.mean(axis=0))


def cumulative_profile(scores: GuidanceScores) -> CumulativeProfile:
    values = scores.values
    if values.shape[0] == 0:
        raise DegenerateScoresError("no scores")
    order = descending_order(values)
    cum = np.cumsum(values[order])
    total = cum[-1]
    if total <= 0.0:
        raise DegenerateScoresError("all-zero scores have no cumulative profile")
    n = values.shape[0]
    return CumulativeProfile(
        token_fraction=np.arange(n + 1) / n,
        attention_fraction=np.concatenate([[0.0], cum / total]),
    )


def write_scores_csv(scores: GuidanceScores, layout: VideoLayout, path) -> None:
    if len(scores) != layout.total:
        raise GuidanceError(f"{len(scores)} scores for a {layout.total}-token layout")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flat_index", "frame", "row", "col", "score"])
        for flat, score in enumerate(scores.values):
            frame, row, col = layout.coords(flat)
            writer.writerow([flat, frame, row, col, repr(float(score))])


def read_scores_csv(path) -> tuple[GuidanceScores, VideoLayout]:
    rows = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                (
                    int(record["flat_index"]),
                    int(record["frame"]),
                    int(record["row"]),
                    int(record["col"]),
                    float(record["score"]),
                )
            )
    if not rows:
        raise GuidanceError(f"no score rows in {path}")
    rows.sort()
    layout = VideoLayout(
        max(r[1] for r in rows) + 1, max(r[2] for r in rows) + 1, max(r[3] for r in rows) + 1
    )
    if [r[0] for r in rows] != list(range(layout.total)):
        raise GuidanceError("score rows do not cover the layout contiguously")
    return GuidanceScores(np.array([r[4] for r in rows])), layout


def write_profile_csv(profile: CumulativeProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction_tokens", "fraction_attention"])
        for x, y in zip(profile.token_fraction, profile.attention_fraction):
            writer.writerow([repr(float(x)), repr(float(y))])
