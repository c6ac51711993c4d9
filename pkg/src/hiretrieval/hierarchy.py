"""Hierarchical labels and per-level positive/negative pair sets.

Labels are stored as cumulative prefixes: level 1 is the root (make),
the last level is the full leaf key (make/type/model/year).  Comparing two
labels at a level is then plain string equality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DELIMITER = "/"


class MalformedLabelError(ValueError):
    pass


class InvalidHierarchyError(ValueError):
    pass


@dataclass(frozen=True)
class HierarchicalLabel:
    path: tuple[str, ...]

    def __post_init__(self):
        if not self.path:
            raise MalformedLabelError("label path is empty")
        for key in self.path:
            if not isinstance(key, str) or not key:
                raise MalformedLabelError(f"invalid level key {key!r}")

    @property
    def depth(self) -> int:
        return len(self.path)

    @property
    def leaf(self) -> str:
        return self.path[-1]

    def key(self, level: int) -> str:
        return level_key(self, level)

    def __str__(self) -> str:
        return self.leaf


def parse_label(spec: str, depth: int | None = None, delimiter: str = DELIMITER) -> HierarchicalLabel:
    """Parse ``"BMW/SUV/X5/2012"`` into its cumulative-prefix label.

    ``depth`` is the number of segments expected; ``None`` accepts any.
    """
    segments = spec.split(delimiter)
    if depth is not None and len(segments) != depth:
        raise MalformedLabelError(f"{spec!r}: expected {depth} segments, got {len(segments)}")
    if any(not s for s in segments):
        raise MalformedLabelError(f"{spec!r}: empty segment")
    path = tuple(delimiter.join(segments[: i + 1]) for i in range(len(segments)))
    return HierarchicalLabel(path)


def level_key(label: HierarchicalLabel, level: int) -> str:
    if not 1 <= level <= label.depth:
        raise IndexError(f"level {level} out of range for depth {label.depth}")
    return label.path[level - 1]


def common_depth(labels: Sequence[HierarchicalLabel]) -> int:
    """Depth shared by every label; mixed depths are an error."""
    depths = {lab.depth for lab in labels}
    if len(depths) != 1:
        raise InvalidHierarchyError(f"mixed label depths: {sorted(depths)}")
    return depths.pop()


def level_codes(labels: Sequence[HierarchicalLabel], level: int) -> np.ndarray:
    """Integer class code per label at ``level`` (codes follow sorted key order)."""
    keys = [level_key(lab, level) for lab in labels]
    uniq = {k: i for i, k in enumerate(sorted(set(keys)))}
    return np.array([uniq[k] for k in keys], dtype=np.int64)


@dataclass(frozen=True)
class PairSets:
    """Positive/negative index sets for every anchor at one level.

    ``pos_mask[i, j]`` is True iff j is in P_l(i); ``neg_mask`` likewise for
    N_l(i).  The diagonal is False in both.
    """

    level: int
    pos_mask: np.ndarray
    neg_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.pos_mask.shape[0]

    def positives(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.pos_mask[i]).tolist())

    def negatives(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.neg_mask[i]).tolist())


def pair_sets(labels: Sequence[HierarchicalLabel], level: int) -> PairSets:
    if len(labels) < 2:
        raise ValueError("pair sets need a batch of at least 2")
    for lab in labels:
        if level > lab.depth:
            raise InvalidHierarchyError(f"level {level} exceeds label depth {lab.depth}")
    codes = level_codes(labels, level)
    same = codes[:, None] == codes[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    pos = same & off_diag
    neg = ~same
    pos.setflags(write=False)
    neg.setflags(write=False)
    return PairSets(level=level, pos_mask=pos, neg_mask=neg)


def read_manifest(path: str | Path, depth: int | None = None) -> dict[str, HierarchicalLabel]:
    """Read a JSON-lines label manifest of ``{"id": ..., "label": "a/b/c"}`` rows."""
    out: dict[str, HierarchicalLabel] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            sid = str(rec["id"])
            if sid in out:
                raise ValueError(f"{path}:{lineno}: duplicate id {sid!r}")
            out[sid] = parse_label(rec["label"], depth)
    return out


def write_manifest(path: str | Path, rows: Iterable[tuple[str, HierarchicalLabel]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sid, lab in rows:
            fh.write(json.dumps({"id": sid, "label": lab.leaf}) + "\n")
