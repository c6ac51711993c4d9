"""Embedded 5x7 bitmap font for plate text and a few 7x7 icons.

Every character glyph touches the top and bottom rows and has no empty
column between its first and last inked column, which the template
recogniser relies on when it segments cells by column projection.
"""

from __future__ import annotations

import numpy as np

GLYPH_ROWS = 7
GLYPH_COLS = 5

_GLYPHS = {
    "A": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "B": ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    "C": [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    "D": ["###..", "#..#.", "#...#", "#...#", "#...#", "#..#.", "###.."],
    "E": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "F": ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    "G": [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".####"],
    "H": ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "I": [".###.", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "J": ["..###", "...#.", "...#.", "...#.", "...#.", "#..#.", ".##.."],
    "K": ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"],
    "L": ["#....", "#....", "#....", "#....", "#....", "#....", "#####"],
    "M": ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"],
    "N": ["#...#", "#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#"],
    "O": [".###.", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "P": ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."],
    "Q": [".###.", "#...#", "#...#", "#...#", "#.#.#", "#..#.", ".##.#"],
    "R": ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"],
    "S": [".####", "#....", "#....", ".###.", "....#", "....#", "####."],
    "T": ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."],
    "U": ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."],
    "V": ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."],
    "W": ["#...#", "#...#", "#...#", "#.#.#", "#.#.#", "#.#.#", ".#.#."],
    "X": ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"],
    "Y": ["#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."],
    "Z": ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"],
    "0": [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    "1": ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    "2": [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    "3": ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    "4": ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    "5": ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    "6": ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    "7": ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    "8": [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    "9": [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
}

_ICONS = {
    "star": ["...#...", "...#...", "#######", ".#####.", "..###..", ".##.##.", "##...##"],
    "circle": ["..###..", ".#...#.", "#.....#", "#.....#", "#.....#", ".#...#.", "..###.."],
    "shield": ["#######", "#.....#", "#.###.#", "#.###.#", ".#...#.", "..#.#..", "...#..."],
    "flag": ["#######", "#######", "#######", ".......", "#######", "#######", "#######"],
}

CHARSET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
ICON_IDS = tuple(sorted(_ICONS))


def _to_array(rows: list[str]) -> np.ndarray:
    return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


GLYPHS: dict[str, np.ndarray] = {ch: _to_array(rows) for ch, rows in _GLYPHS.items()}
ICONS: dict[str, np.ndarray] = {name: _to_array(rows) for name, rows in _ICONS.items()}


def glyph(ch: str) -> np.ndarray:
    try:
        return GLYPHS[ch]
    except KeyError:
        raise ValueError(f"no glyph for character {ch!r}") from None


def render_text_mask(text: str, scale: int) -> np.ndarray:
    """Boolean ink mask of ``text`` at integer ``scale``, one blank column-unit between glyphs."""
    if scale < 1:
        raise ValueError("scale must be at least 1")
    if not text:
        return np.zeros((GLYPH_ROWS * scale, 0), dtype=bool)
    cells = []
    gap = np.zeros((GLYPH_ROWS, 1), dtype=bool)
    for i, ch in enumerate(text):
        if i:
            cells.append(gap)
        cells.append(glyph(ch))
    mask = np.hstack(cells)
    return np.kron(mask, np.ones((scale, scale), dtype=bool)).astype(bool)


def text_width(n_chars: int, scale: int) -> int:
    return max(0, (GLYPH_COLS + 1) * n_chars - 1) * scale
