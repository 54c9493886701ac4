"""Token-selection policies: which cache positions stay at full precision.

Four strategies, each usable in quantize-the-rest or evict-the-rest mode:

* ``logquant``   - log-spaced decimation: keep up to 3W tokens; whenever the
  budget is hit, thin the oldest 2W kept entries to every second one, so the
  surviving density halves with each pass and old tokens end up spaced in
  powers of two.
* ``kivi``       - sliding window of the R most recent tokens; optionally
  releases in batches of G to mirror grouped quantization.
* ``streaming_llm`` - the first ``sink_count`` tokens pinned forever plus a
  sliding window over the remaining budget.
* ``h2o``        - heavy hitters: keep the top-scoring tokens by cumulative
  attention mass, plus an optional always-kept recent window.

A policy is a deterministic state machine over strictly increasing token
positions.  Every appended position is either currently kept or was released
exactly once; nothing is ever re-admitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping

PolicyKind = Literal["logquant", "kivi", "streaming_llm", "h2o"]
Mode = Literal["quantize_rest", "evict_rest"]

POLICY_KINDS = ("logquant", "kivi", "streaming_llm", "h2o")
MODES = ("quantize_rest", "evict_rest")


@dataclass(frozen=True)
class PolicyConfig:
    """Policy kind plus its budget knobs.

    ``window`` is the decimation window W for ``logquant`` (full-precision
    budget 3W) and the full-precision budget R for every other kind.
    ``release_batch`` batches window releases in groups of that size
    (kivi/streaming only); None releases exactly at the window edge.
    """

    kind: PolicyKind
    window: int
    sink_count: int = 0
    mode: Mode = "quantize_rest"
    recent_window: int = 0
    release_batch: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.sink_count < 0:
            raise ValueError("sink_count must be >= 0")
        if self.sink_count >= self.fp_budget:
            raise ValueError(
                f"sink_count {self.sink_count} must be below the budget {self.fp_budget}"
            )
        if self.kind == "h2o" and self.recent_window > self.window:
            raise ValueError("recent_window cannot exceed the h2o budget")
        if self.release_batch is not None and self.release_batch < 1:
            raise ValueError("release_batch must be >= 1")

    @property
    def fp_budget(self) -> int:
        """Maximum full-precision occupancy."""
        return 3 * self.window if self.kind == "logquant" else self.window


def config_for_budget(kind: str, budget: int, mode: Mode = "quantize_rest",
                      sink_count: int | None = None, recent_window: int = 0,
                      release_batch: int | None = None) -> PolicyConfig:
    """Build a PolicyConfig from a shared full-precision budget R.

    logquant derives W = floor(R/3), so its 3W kept tokens never exceed the
    R granted to the window baselines.  streaming_llm defaults to 4 sinks.
    """
    if kind == "logquant":
        if budget < 3:
            raise ValueError(f"logquant needs budget >= 3, got {budget}")
        return PolicyConfig("logquant", budget // 3, mode=mode)
    if sink_count is None:
        sink_count = 4 if kind == "streaming_llm" else 0
    return PolicyConfig(kind, budget, sink_count=sink_count, mode=mode,
                        recent_window=recent_window, release_batch=release_batch)


@dataclass
class SelectionState:
    """Mutable per-stream policy state.

    ``kept`` stays strictly increasing in original position; ``released_log``
    is an append-only list of (position appended at the time, released
    positions) events; ``h2o_scores`` maps kept positions to cumulative
    attention mass (h2o only).
    """

    kept: list[int] = field(default_factory=list)
    released_log: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    h2o_scores: dict[int, float] = field(default_factory=dict)
    last_appended: int = -1

    @property
    def appended_count(self) -> int:
        return len(self.kept) + sum(len(r) for _, r in self.released_log)

    def all_released(self) -> list[int]:
        out: list[int] = []
        for _, positions in self.released_log:
            out.extend(positions)
        return out


def _admit(state: SelectionState, new_pos: int) -> None:
    if new_pos <= state.last_appended:
        raise ValueError(
            f"positions must be strictly increasing: got {new_pos} after {state.last_appended}"
        )
    state.last_appended = new_pos


def _record(state: SelectionState, new_pos: int, released: list[int]) -> None:
    if released:
        state.released_log.append((new_pos, tuple(released)))


def logquant_append(state: SelectionState, new_pos: int, w: int
                    ) -> tuple[SelectionState, list[int]]:
    """Append under the log-spaced schedule with window length W.

    Below 3W kept tokens the new position is simply appended.  At 3W the
    oldest 2W entries are thinned to their even indices (0, 2, 4, ...), the W
    odd-index entries are released, and the new position is appended; kept
    occupancy therefore oscillates between 2W and 3W once warm.
    """
    _admit(state, new_pos)
    released: list[int] = []
    if len(state.kept) >= 3 * w:
        released = state.kept[1:2 * w:2]
        state.kept = state.kept[0:2 * w:2] + state.kept[2 * w:3 * w]
    state.kept.append(new_pos)
    _record(state, new_pos, released)
    return state, released


def _window_overflow(tail_len: int, window_budget: int, release_batch: int | None) -> int:
    """How many of the oldest window entries to release on this append."""
    overflow = tail_len - window_budget
    if overflow >= (release_batch or 1):
        return overflow
    return 0


def kivi_append(state: SelectionState, new_pos: int, budget: int,
                release_batch: int | None = None) -> tuple[SelectionState, list[int]]:
    """Sliding window keeping the most recent ``budget`` positions.

    With ``release_batch=g`` the oldest tokens leave only once g of them
    have slid out of the window, in one batch of g; occupancy then rides
    between R and R+g-1 instead of sitting at R.
    """
    _admit(state, new_pos)
    state.kept.append(new_pos)
    n = _window_overflow(len(state.kept), budget, release_batch)
    released = state.kept[:n]
    if n:
        state.kept = state.kept[n:]
    _record(state, new_pos, released)
    return state, released


def streaming_append(state: SelectionState, new_pos: int, budget: int,
                     sink_count: int = 4, release_batch: int | None = None
                     ) -> tuple[SelectionState, list[int]]:
    """Sliding window plus the first ``sink_count`` positions pinned forever."""
    if budget <= sink_count:
        raise ValueError(f"budget {budget} must exceed sink_count {sink_count}")
    _admit(state, new_pos)
    state.kept.append(new_pos)
    if len(state.kept) <= budget:
        _record(state, new_pos, [])
        return state, []
    sinks = state.kept[:sink_count]
    tail = state.kept[sink_count:]
    n = _window_overflow(len(tail), budget - sink_count, release_batch)
    released = tail[:n]
    if n:
        state.kept = sinks + tail[n:]
    _record(state, new_pos, released)
    return state, released


def h2o_select(scores: Mapping[int, float], budget: int, recent_window: int = 0
               ) -> list[int]:
    """Pick the kept set from cumulative attention scores.

    Keeps the most recent ``recent_window`` positions unconditionally plus
    the top ``budget - recent_window`` others by score, ties resolved toward
    more recent positions.  Returns positions in increasing order.
    """
    if budget < recent_window:
        raise ValueError(f"budget {budget} < recent_window {recent_window}")
    live = sorted(scores)
    if len(live) <= budget:
        return live
    recent = live[len(live) - recent_window:] if recent_window else []
    rest = live[:len(live) - recent_window]
    k = budget - recent_window
    top = sorted(rest, key=lambda p: (scores[p], p), reverse=True)[:k]
    return sorted(top + recent)


def h2o_append(state: SelectionState, new_pos: int, budget: int,
               recent_window: int = 0) -> tuple[SelectionState, list[int]]:
    """Admit a token, then shrink back to budget via h2o_select."""
    _admit(state, new_pos)
    state.kept.append(new_pos)
    state.h2o_scores.setdefault(new_pos, 0.0)
    released: list[int] = []
    if len(state.kept) > budget:
        survivors = h2o_select(state.h2o_scores, budget, recent_window)
        survivor_set = set(survivors)
        released = [p for p in state.kept if p not in survivor_set]
        state.kept = survivors
        for p in released:
            state.h2o_scores.pop(p, None)
    _record(state, new_pos, released)
    return state, released


def update_h2o_scores(state: SelectionState, dist) -> SelectionState:
    """Accumulate one step of attention mass onto the kept positions.

    ``dist`` must align with ``state.kept`` (one entry per kept position, in
    order).  Released positions have already dropped their scores.
    """
    dist = list(dist)
    if len(dist) != len(state.kept):
        raise ValueError(
            f"length mismatch: {len(dist)} attention entries for {len(state.kept)} kept positions"
        )
    for pos, mass in zip(state.kept, dist):
        state.h2o_scores[pos] = state.h2o_scores.get(pos, 0.0) + float(mass)
    return state


def policy_append(cfg: PolicyConfig, state: SelectionState, new_pos: int) -> list[int]:
    """Advance any policy one token; returns the released positions."""
    if cfg.kind == "logquant":
        return logquant_append(state, new_pos, cfg.window)[1]
    if cfg.kind == "kivi":
        return kivi_append(state, new_pos, cfg.window, cfg.release_batch)[1]
    if cfg.kind == "streaming_llm":
        return streaming_append(state, new_pos, cfg.window, cfg.sink_count,
                                cfg.release_batch)[1]
    if cfg.kind == "h2o":
        return h2o_append(state, new_pos, cfg.window, cfg.recent_window)[1]
    raise ValueError(f"unknown policy kind {cfg.kind!r}")
