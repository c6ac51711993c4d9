"""Multi-similarity, hierarchical SupCon and hierarchical multi-similarity losses.

All losses work on cosine similarities of L2-normalised embeddings and return
the analytic gradient with respect to the raw (un-normalised) embedding batch.
Pair mining and the hierarchical clamp are piecewise-constant selections; no
gradient flows through them.  The selections made on one evaluation can be
handed back through ``selection=`` to re-evaluate the loss with them frozen,
which is what finite-difference checks need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .hierarchy import HierarchicalLabel, InvalidHierarchyError, PairSets, common_depth, pair_sets

FLAT_MS = "flat-ms"
HI_SUPCON = "hi-supcon"
HI_MS_MAX = "hi-ms-max"
HI_MS_MIN = "hi-ms-min"
MODES = (FLAT_MS, HI_SUPCON, HI_MS_MAX, HI_MS_MIN)
HIERARCHICAL_MODES = (HI_SUPCON, HI_MS_MAX, HI_MS_MIN)


class DegenerateEmbeddingError(ValueError):
    pass


def exp_inverse_level(level: int) -> float:
    return math.exp(1.0 / level)


@dataclass(frozen=True)
class LossParams:
    alpha: float = 2.0
    beta: float = 50.0
    margin: float = 1.0
    mining_epsilon: float = 0.1
    tau: float = 0.1
    mode: str = HI_MS_MIN
    level_weight: Callable[[int], float] = exp_inverse_level

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.mining_epsilon < 0:
            raise ValueError("mining_epsilon must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}; expected one of {MODES}")


@dataclass(frozen=True)
class MinedPairs:
    level: int
    pos_mask: np.ndarray
    neg_mask: np.ndarray

    def positives(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.pos_mask[i]).tolist())

    def negatives(self, i: int) -> set[int]:
        return set(np.flatnonzero(self.neg_mask[i]).tolist())


@dataclass
class LevelTerms:
    """Per-pair terms of one hierarchy level.

    ``mask`` marks the pairs that enter the level's sum; ``running_in`` is the
    clamp bound inherited from the previous level in traversal order
    (``-inf``/``+inf`` for the first one) and ``running_out`` the bound handed
    on to the next level.
    """

    level: int
    mask: np.ndarray
    positive: np.ndarray
    base: np.ndarray
    clamped: np.ndarray
    running_in: float
    running_out: float


@dataclass
class Selection:
    """Frozen mining and clamp choices of one loss evaluation."""

    mode: str
    mined: dict[int, MinedPairs] = field(default_factory=dict)
    take_base: dict[int, np.ndarray] = field(default_factory=dict)
    # (level, i, j) of the base term that sets the clamp bound entering a level
    source_in: dict[int, tuple[int, int, int] | None] = field(default_factory=dict)


@dataclass
class LossOutput:
    value: float
    grad_embeddings: np.ndarray
    per_pair_terms: dict[int, LevelTerms] | None = None
    selection: Selection | None = None


def _normalize(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"expected a B x D batch with B >= 2, got shape {z.shape}")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms <= np.finfo(np.float64).tiny) or not np.all(np.isfinite(norms)):
        raise DegenerateEmbeddingError("embedding batch contains a zero-norm or non-finite row")
    return z / norms[:, None], norms


def similarity_matrix(embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarities ``s_ij`` of the row-normalised batch."""
    zhat, _ = _normalize(embeddings)
    sim = zhat @ zhat.T
    np.clip(sim, -1.0, 1.0, out=sim)
    np.fill_diagonal(sim, 1.0)
    return sim


def _backprop_similarity(grad_sim: np.ndarray, zhat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    g_hat = (grad_sim + grad_sim.T) @ zhat
    radial = np.sum(g_hat * zhat, axis=1, keepdims=True)
    return (g_hat - radial * zhat) / norms[:, None]


def mine_pairs(sim: np.ndarray, pairs: PairSets, epsilon: float) -> MinedPairs:
    """Keep negatives harder than the weakest positive and positives harder
    than the strongest negative, each with slack ``epsilon``."""
    pos, neg = pairs.pos_mask, pairs.neg_mask
    has_pos = pos.any(axis=1)
    has_neg = neg.any(axis=1)
    min_pos = np.where(pos, sim, np.inf).min(axis=1)
    max_neg = np.where(neg, sim, -np.inf).max(axis=1)
    with np.errstate(invalid="ignore"):
        keep_neg = neg & (sim > (min_pos - epsilon)[:, None])
        keep_pos = pos & (sim < (max_neg + epsilon)[:, None])
    # no positives: the anchor drops out entirely; no negatives: every positive stays
    keep_neg &= (has_pos & has_neg)[:, None]
    keep_pos &= has_pos[:, None]
    keep_pos |= pos & (has_pos & ~has_neg)[:, None]
    return MinedPairs(level=pairs.level, pos_mask=keep_pos, neg_mask=keep_neg)


def _log1p_sum_exp(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``log(1 + sum_j exp(a_ij))`` and its weights ``d/da_ij``.

    Entries equal to ``-inf`` are excluded from the sum.
    """
    m = np.maximum(a.max(axis=1), 0.0)
    e = np.exp(a - m[:, None])
    denom = np.exp(-m) + e.sum(axis=1)
    return m + np.log(denom), e / denom[:, None]


def ms_loss(
    embeddings: np.ndarray,
    pairs: PairSets,
    params: LossParams = LossParams(mode=FLAT_MS),
    selection: Selection | None = None,
) -> LossOutput:
    """Flat multi-similarity loss over the mined pairs of ``pairs``."""
    zhat, norms = _normalize(embeddings)
    sim = zhat @ zhat.T
    b = sim.shape[0]
    if selection is None:
        mined = mine_pairs(sim, pairs, params.mining_epsilon)
        selection = Selection(mode=FLAT_MS, mined={pairs.level: mined})
    else:
        mined = selection.mined[pairs.level]

    a_pos = np.where(mined.pos_mask, -params.alpha * (sim - params.margin), -np.inf)
    a_neg = np.where(mined.neg_mask, params.beta * (sim - params.margin), -np.inf)
    lp, wp = _log1p_sum_exp(a_pos)
    ln, wn = _log1p_sum_exp(a_neg)
    value = float(np.sum(lp / params.alpha + ln / params.beta) / b)

    grad_sim = (wn - wp) / b
    grad = _backprop_similarity(grad_sim, zhat, norms)
    return LossOutput(value=value, grad_embeddings=grad, selection=selection)


def supcon_pair_terms(embeddings: np.ndarray, pairs: PairSets, tau: float) -> np.ndarray:
    """SupCon term for every positive pair (i, p); NaN elsewhere."""
    zhat, _ = _normalize(embeddings)
    sim = zhat @ zhat.T
    terms, _ = _supcon_terms(sim, tau)
    return np.where(pairs.pos_mask, terms, np.nan)


def _supcon_terms(sim: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    logits = sim / tau
    np.fill_diagonal(logits, -np.inf)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    log_denom = m + np.log(z)
    terms = log_denom - logits
    softmax = e / z
    return terms, softmax


def _ms_pair_terms(sim: np.ndarray, params: LossParams) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    xp = -params.alpha * (sim - params.margin)
    xn = params.beta * (sim - params.margin)
    lpos = np.logaddexp(0.0, xp) / params.alpha
    lneg = np.logaddexp(0.0, xn) / params.beta
    dpos = -expit(xp)
    dneg = expit(xn)
    return lpos, lneg, dpos, dneg


def hierarchical_loss(
    embeddings: np.ndarray,
    labels: Sequence[HierarchicalLabel],
    params: LossParams,
    selection: Selection | None = None,
) -> LossOutput:
    """HiSupCon, HiMS-Max or HiMS-Min over every level of the label tree.

    Top-down modes clamp each level's terms from below by the largest
    clamped term of the level above; HiMS-Min walks leaf to root and clamps
    from above by the smallest clamped term of the level below.  Each level
    is weighted by ``params.level_weight(l) / depth`` and every anchor's terms
    are averaged over its own pair set at that level.
    """
    mode = params.mode
    if mode not in HIERARCHICAL_MODES:
        raise ValueError(f"hierarchical_loss needs one of {HIERARCHICAL_MODES}, got {mode!r}")
    zhat, norms = _normalize(embeddings)
    if len(labels) != zhat.shape[0]:
        raise ValueError("labels and embeddings disagree on batch size")
    depth = common_depth(labels)
    sim = zhat @ zhat.T
    b = sim.shape[0]
    frozen = selection is not None
    if not frozen:
        selection = Selection(mode=mode)
    elif selection.mode != mode:
        raise ValueError("selection was recorded for a different loss mode")

    supcon = mode == HI_SUPCON
    if supcon:
        sc_terms, sc_softmax = _supcon_terms(sim, params.tau)
    else:
        lpos, lneg, dpos, dneg = _ms_pair_terms(sim, params)

    levels = list(range(1, depth + 1))
    use_max = mode in (HI_SUPCON, HI_MS_MAX)
    if not use_max:
        levels.reverse()

    masks: dict[int, np.ndarray] = {}
    polarity: dict[int, np.ndarray] = {}
    bases: dict[int, np.ndarray] = {}
    for lvl in levels:
        ps = pair_sets(labels, lvl)
        if supcon:
            mask = ps.pos_mask
            base = np.where(mask, sc_terms, 0.0)
        else:
            mined = selection.mined[lvl] if frozen else mine_pairs(sim, ps, params.mining_epsilon)
            if not frozen:
                selection.mined[lvl] = mined
            mask = mined.pos_mask | mined.neg_mask
            base = np.where(mined.pos_mask, lpos, np.where(mined.neg_mask, lneg, 0.0))
        masks[lvl] = mask
        polarity[lvl] = ps.pos_mask
        bases[lvl] = base

    def base_value(src: tuple[int, int, int] | None) -> float:
        if src is None:
            return -np.inf if use_max else np.inf
        lvl, i, j = src
        return float(bases[lvl][i, j])

    coef = {lvl: np.zeros((b, b)) for lvl in levels}
    terms: dict[int, LevelTerms] = {}
    value = 0.0
    src: tuple[int, int, int] | None = None
    for lvl in levels:
        mask, base = masks[lvl], bases[lvl]
        if frozen:
            src = selection.source_in[lvl]
        else:
            selection.source_in[lvl] = src
        running_in = base_value(src)
        if frozen:
            take_base = selection.take_base[lvl]
        else:
            take_base = mask & ((base >= running_in) if use_max else (base <= running_in))
            selection.take_base[lvl] = take_base
        clamped = np.where(mask, np.where(take_base, base, running_in), 0.0)

        counts = mask.sum(axis=1)
        active = counts > 0
        w = np.zeros(b)
        w[active] = params.level_weight(lvl) / (depth * counts[active])
        value += float(np.sum(w * clamped.sum(axis=1)))

        coef[lvl] += np.where(take_base, w[:, None], 0.0)
        borrowed = float(np.sum(np.where(mask & ~take_base, w[:, None], 0.0)))
        if borrowed and src is not None:
            coef[src[0]][src[1], src[2]] += borrowed

        if mask.any():
            flat = np.where(mask, clamped, -np.inf if use_max else np.inf)
            idx = int(np.argmax(flat) if use_max else np.argmin(flat))
            i, j = divmod(idx, b)
            if take_base[i, j]:
                src = (lvl, i, j)
        running_out = base_value(src)
        terms[lvl] = LevelTerms(
            level=lvl,
            mask=mask,
            positive=polarity[lvl],
            base=np.where(mask, base, np.nan),
            clamped=np.where(mask, clamped, np.nan),
            running_in=running_in,
            running_out=running_out,
        )

    grad_sim = np.zeros((b, b))
    if supcon:
        for lvl in levels:
            c = coef[lvl]
            grad_sim -= c / params.tau
            grad_sim += c.sum(axis=1, keepdims=True) * sc_softmax / params.tau
    else:
        for lvl in levels:
            c = coef[lvl]
            pos = polarity[lvl]
            grad_sim += c * np.where(pos, dpos, dneg)
    np.fill_diagonal(grad_sim, 0.0)
    grad = _backprop_similarity(grad_sim, zhat, norms)
    return LossOutput(value=value, grad_embeddings=grad, per_pair_terms=terms, selection=selection)


def compute_loss(
    embeddings: np.ndarray,
    labels: Sequence[HierarchicalLabel],
    params: LossParams,
    selection: Selection | None = None,
) -> LossOutput:
    """Dispatch on ``params.mode``; flat MS uses the leaf level only."""
    if params.mode == FLAT_MS:
        depth = common_depth(labels)
        return ms_loss(embeddings, pair_sets(labels, depth), params, selection)
    return hierarchical_loss(embeddings, labels, params, selection)


def mode_from_flag(flag: str) -> str:
    """Map CLI spellings such as ``hims-min`` or ``ms`` to a loss mode."""
    aliases = {
        "ms": FLAT_MS,
        "flat-ms": FLAT_MS,
        "multi-similarity": FLAT_MS,
        "hisupcon": HI_SUPCON,
        "hi-supcon": HI_SUPCON,
        "hims-max": HI_MS_MAX,
        "hi-ms-max": HI_MS_MAX,
        "hims-min": HI_MS_MIN,
        "hi-ms-min": HI_MS_MIN,
    }
    try:
        return aliases[flag.lower()]
    except KeyError:
        raise ValueError(f"unknown loss mode flag {flag!r}") from None


__all__ = [
    "FLAT_MS",
    "HI_SUPCON",
    "HI_MS_MAX",
    "HI_MS_MIN",
    "MODES",
    "DegenerateEmbeddingError",
    "InvalidHierarchyError",
    "LossParams",
    "LossOutput",
    "LevelTerms",
    "MinedPairs",
    "Selection",
    "compute_loss",
    "hierarchical_loss",
    "mine_pairs",
    "mode_from_flag",
    "ms_loss",
    "similarity_matrix",
    "supcon_pair_terms",
]
