"""Adaptive hybrid masking: word/phrase planners, corruption, and the mode controller."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .phrases import PoolSpan
from .textcorpus import MASK, NUM_SPECIAL, TokenSequence

IGNORE = -100  # target sentinel at unmasked positions
EPS = 1e-8

ACTION_MASK, ACTION_RANDOM, ACTION_KEEP = 0, 1, 2


class Mode(str, enum.Enum):
    WORD = "word"
    PHRASE = "phrase"


@dataclass
class MaskingPlan:
    positions: list[int]
    mode: Mode
    # positions added by word-level filling in phrase mode
    fill_positions: list[int] = field(default_factory=list)
    spans: list[tuple[int, int]] = field(default_factory=list)
    actions: list[int] | None = None
    targets: list[int] | None = None

    @property
    def skip(self) -> bool:
        return not self.positions

    def __len__(self):
        return len(self.positions)


def maskable_positions(ids: Sequence[int]) -> list[int]:
    return [i for i, t in enumerate(ids) if t >= NUM_SPECIAL]


def mask_quota(n_maskable: int, rate: float = 0.15) -> int:
    """max(1, round-half-up(rate * n)); 0 when nothing is maskable."""
    if n_maskable <= 0:
        return 0
    return max(1, int(math.floor(rate * n_maskable + 0.5)))


def phrase_budget(n_maskable: int, rate: float = 0.15, max_fraction: float = 0.20) -> int:
    """Token cap for accepted phrase spans: ceil(rate * n), never above ``max_fraction``."""
    if n_maskable <= 0:
        return 0
    k = mask_quota(n_maskable, rate)
    cap = math.ceil(rate * n_maskable - 1e-12)
    return max(k, min(cap, int(math.floor(max_fraction * n_maskable + 1e-12))))


def plan_word_mask(seq: TokenSequence | Sequence[int], rng: np.random.Generator,
                   rate: float = 0.15) -> MaskingPlan:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    cand = maskable_positions(ids)
    k = mask_quota(len(cand), rate)
    if k == 0:
        return MaskingPlan([], Mode.WORD)
    chosen = rng.choice(len(cand), size=k, replace=False)
    return MaskingPlan(sorted(cand[i] for i in chosen), Mode.WORD)


def phrase_probabilities(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def sample_phrase(spans: Sequence[PoolSpan], rng: np.random.Generator) -> int:
    """Index of a span drawn with probability softmax(score)."""
    if not spans:
        raise LookupError("temporary phrase pool is empty; fall back to word masking")
    p = phrase_probabilities([sp.score for sp in spans])
    return int(rng.choice(len(spans), p=p))


def plan_phrase_mask(seq: TokenSequence | Sequence[int], temp_pool: Sequence[PoolSpan],
                     rng: np.random.Generator, rate: float = 0.15) -> MaskingPlan:
    """Sample whole phrases without replacement up to the budget, then fill with words."""
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    cand = maskable_positions(ids)
    n = len(cand)
    k = mask_quota(n, rate)
    budget = phrase_budget(n, rate)
    maskable = set(cand)
    remaining = [sp for sp in temp_pool if all(i in maskable for i in range(sp.start, sp.end))]
    chosen: set[int] = set()
    spans = []
    while remaining and len(chosen) < budget:
        sp = remaining.pop(sample_phrase(remaining, rng))
        if len(chosen) + len(sp) <= budget:
            chosen.update(range(sp.start, sp.end))
            spans.append((sp.start, sp.end))
    fill = []
    if len(chosen) < k:
        free = [i for i in cand if i not in chosen]
        picks = rng.choice(len(free), size=k - len(chosen), replace=False)
        fill = sorted(free[i] for i in picks)
        chosen.update(fill)
    return MaskingPlan(sorted(chosen), Mode.PHRASE, fill, sorted(spans))


def corrupt(ids: Sequence[int], plan: MaskingPlan, rng: np.random.Generator,
            vocab_size: int) -> tuple[list[int], list[int]]:
    """80% [MASK], 10% random non-special id, 10% unchanged, per masked position."""
    out = list(ids)
    targets = [IGNORE] * len(ids)
    actions = []
    for pos in plan.positions:
        targets[pos] = ids[pos]
        r = rng.random()
        if r < 0.8:
            out[pos] = MASK
            actions.append(ACTION_MASK)
        elif r < 0.9:
            out[pos] = int(rng.integers(NUM_SPECIAL, vocab_size))
            actions.append(ACTION_RANDOM)
        else:
            actions.append(ACTION_KEEP)
    plan.actions = actions
    plan.targets = [ids[p] for p in plan.positions]
    return out, targets


# ---------------------------------------------------------------------------
# controller


@dataclass
class ModeStats:
    first: float | None = None
    prev: float | None = None
    cur: float | None = None
    ema: float | None = None
    count: int = 0
    eta: float = 1.0


@dataclass
class ControllerState:
    """Switching state. ``t`` counts draws made so far."""

    alpha0: float = 0.9
    t1: int = 0
    ema_decay: float = 0.9
    fixed: Mode | None = None
    t: int = 0
    alpha: float = 0.9
    word: ModeStats = field(default_factory=ModeStats)
    phrase: ModeStats = field(default_factory=ModeStats)

    def __post_init__(self):
        if not 0.5 < self.alpha0 <= 1.0:
            raise ValueError("alpha0 must lie in (0.5, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if isinstance(self.fixed, str):
            self.fixed = Mode(self.fixed)
        self.alpha = self._fixed_alpha() if self.fixed else self.alpha0

    def _fixed_alpha(self):
        return 1.0 if self.fixed == Mode.WORD else 0.0

    def stats(self, mode: Mode) -> ModeStats:
        return self.word if Mode(mode) == Mode.WORD else self.phrase

    @property
    def eta_w(self) -> float:
        return self.word.eta

    @property
    def eta_p(self) -> float:
        return self.phrase.eta

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fixed"] = self.fixed.value if self.fixed else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ControllerState":
        d = dict(d)
        word = ModeStats(**d.pop("word"))
        phrase = ModeStats(**d.pop("phrase"))
        t, alpha = d.pop("t"), d.pop("alpha")
        state = cls(**d)
        state.word, state.phrase, state.t, state.alpha = word, phrase, t, alpha
        return state


def fitting_index(first: float, prev: float, cur: float) -> float:
    """[prev - cur]_+ / max(first - cur, eps)."""
    return max(prev - cur, 0.0) / max(first - cur, EPS)


def mode_probability(eta_w: float, eta_p: float) -> float:
    gamma = eta_w / max(eta_p, EPS)
    return min(max(math.tanh(gamma), 0.0), 1.0)


def update_controller(state: ControllerState, mode: Mode, loss: float) -> ControllerState:
    """Fold the loss observed for the selected mode into that mode's history."""
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite {Mode(mode).value}-mode loss: {loss}")
    st = state.stats(mode)
    st.ema = loss if st.ema is None else state.ema_decay * st.ema + (1.0 - state.ema_decay) * loss
    st.count += 1
    if st.first is None:
        st.first = st.ema
    st.prev, st.cur = st.cur, st.ema
    st.eta = 1.0 if st.count < 2 else fitting_index(st.first, st.prev, st.cur)
    return state


def next_alpha(state: ControllerState) -> float:
    """Word-mode probability for draw number ``state.t + 1``."""
    if state.fixed is not None:
        return state._fixed_alpha()
    if state.t + 1 <= state.t1:
        return state.alpha0
    return mode_probability(state.word.eta, state.phrase.eta)


def select_mode(state: ControllerState, rng: np.random.Generator) -> Mode:
    state.alpha = next_alpha(state)
    state.t += 1
    r = rng.random()
    return Mode.WORD if r < state.alpha else Mode.PHRASE


TRACE_HEADER = ["step", "mode", "loss_ema_word", "loss_ema_phrase", "eta_w", "eta_p", "alpha"]


def trace_row(state: ControllerState, mode: Mode) -> list:
    def fmt(x):
        return "" if x is None else repr(float(x))

    return [state.t, Mode(mode).value, fmt(state.word.ema), fmt(state.phrase.ema),
            fmt(state.word.eta), fmt(state.phrase.eta), fmt(state.alpha)]
