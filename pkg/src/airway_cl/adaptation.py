"""Incremental few-shot adaptation schedules (sliding window over selected scans).

Selection: the ``n_target`` easiest target scans, optionally preceded by
the ``n_source`` hardest source scans; each block is in ascending
complexity unless told otherwise. Windows of ``window_size`` slide by
``step_size`` positions and each lasts ``step_epochs`` epochs. When the last
full window stops short of the sequence end, one more window is appended,
shifted left so that it ends exactly at the end.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .rng import Stream
from .schedule import Phase, Schedule
from .scoring.ranking import ScoreTable

MODES = ("target", "source2target")


@dataclass(frozen=True)
class WindowParams:
    window_size: int = 5
    step_size: int = 1
    step_epochs: int = 5

    def __post_init__(self):
        if min(self.window_size, self.step_size, self.step_epochs) < 1:
            raise ValueError("window size, step size and step epochs must all be >= 1")


@dataclass(frozen=True)
class DomainSequence:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(i), str(d)) for i, d in self.entries))
        ids = self.ids
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate scan id in domain sequence")
        if any(d not in ("source", "target") for _, d in self.entries):
            raise ValueError("domain must be 'source' or 'target'")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.entries]

    def domain_of(self) -> dict[str, str]:
        return dict(self.entries)


def adaptation_digest(target_scores: ScoreTable, source_scores: ScoreTable | None = None) -> str:
    payload = target_scores.to_csv() + (source_scores.to_csv() if source_scores is not None else "")
    return hashlib.blake2b(payload.encode("utf-8"), digest_size=8).hexdigest()


def select_scans(target_scores: ScoreTable, source_scores: ScoreTable | None = None, n_target: int = 20,
                 n_source: int = 19, mode: str = "source2target", source_order: str = "ascending") -> DomainSequence:
    """Pick the easiest target scans, preceded in source2target mode by the hardest source scans."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {MODES}")
    if source_order not in ("ascending", "descending"):
        raise ValueError("source_order must be 'ascending' or 'descending'")
    if n_target < 1 or n_target > len(target_scores):
        raise ValueError(f"need {n_target} target scans, table has {len(target_scores)}")
    entries = [(i, "target") for i in target_scores.ids[:n_target]]
    if mode == "source2target":
        if source_scores is None:
            raise ValueError("source2target needs a source score table")
        if n_source < 1 or n_source > len(source_scores):
            raise ValueError(f"need {n_source} source scans, table has {len(source_scores)}")
        hardest = source_scores.ids[len(source_scores) - n_source :]
        if source_order == "descending":
            hardest = hardest[::-1]
        entries = [(i, "source") for i in hardest] + entries
    return DomainSequence(tuple(entries))


def window_starts(length: int, p: WindowParams) -> list[int]:
    if p.window_size > length:
        raise ValueError(f"window of {p.window_size} exceeds sequence of {length}")
    starts = list(range(0, length - p.window_size + 1, p.step_size))
    if starts[-1] + p.window_size < length:
        starts.append(length - p.window_size)
    return starts


def window_schedule(seq: DomainSequence, p: WindowParams = WindowParams(), strategy: str | None = None,
                    score_digest: str = "0" * 16, seed: int = 0, shuffle: bool = False) -> Schedule:
    """One phase per window position; ids keep sequence order unless ``shuffle``.

    A step longer than the window would skip scans, so it is rejected.
    """
    if p.step_size > p.window_size:
        raise ValueError(f"step {p.step_size} exceeds window {p.window_size}; some scans would never be visited")
    domains = seq.domain_of()
    if strategy is None:
        strategy = "source2target" if any(d == "source" for d in domains.values()) else "target"
    phases = []
    for k, start in enumerate(window_starts(len(seq), p)):
        ids = seq.ids[start : start + p.window_size]
        if shuffle:
            Stream.from_seed(seed, "window", k).shuffle(ids)
        n_src = sum(domains[i] == "source" for i in ids)
        phases.append(Phase(k, tuple(ids), p.step_epochs, domain_mix=(n_src, len(ids) - n_src)))
    return Schedule(tuple(phases), strategy, seed, score_digest)


def random_schedule(target_scores: ScoreTable, n: int = 20, epochs: int = 80, seed: int = 0) -> Schedule:
    """Control run: ``n`` target scans picked uniformly at random, one phase."""
    if n < 1 or n > len(target_scores):
        raise ValueError(f"need {n} target scans, table has {len(target_scores)}")
    ids = Stream.from_seed(seed, "random-selection").sample(target_scores.ids, n)
    phase = Phase(0, tuple(ids), int(epochs), domain_mix=(0, n))
    return Schedule((phase,), "random", seed, adaptation_digest(target_scores))


def domain_mix(schedule: Schedule, seq: DomainSequence) -> list[tuple[int, int]]:
    """(source count, target count) for every phase."""
    domains = seq.domain_of()
    out = []
    for ph in schedule.phases:
        missing = [i for i in ph.scan_ids if i not in domains]
        if missing:
            raise ValueError(f"phase {ph.index} has ids outside the sequence: {missing}")
        src = sum(domains[i] == "source" for i in ph.scan_ids)
        out.append((src, len(ph.scan_ids) - src))
    return out
