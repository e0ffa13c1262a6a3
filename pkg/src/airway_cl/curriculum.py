"""Full-training curricula: three ranked batches trained 20/70/110 epochs.

Batch sizes are ``floor(f * N)`` (at least one scan) for every fraction but
the last, which takes the remainder. Each later phase also revisits
``ceil(overlap_frac * |batch|)`` scans drawn from the batches already
visited. Strategies:

``vanilla``  easy -> hard.
``mixed``    vanilla, plus ``ceil(mixed_frac * |phase|)`` scans ranked
             strictly after the phase's own batch, for every phase but the last.
``reverse``  vanilla's batches visited hard -> easy; overlap comes from the
             harder batches already visited. Epochs stay attached to
             phase position.
``no_cl``    one phase, every scan, ``sum(epochs)`` epochs.

Within a phase the scan order is a seeded shuffle.
"""

from __future__ import annotations

import math

from .rng import Stream
from .schedule import Phase, Schedule
from .scoring.ranking import ScoreTable

STRATEGIES = ("vanilla", "mixed", "reverse", "no_cl")
FRACTIONS = (0.15, 0.40, 0.45)
EPOCHS = (20, 70, 110)

_EPS = 1e-9


def _floor(x: float) -> int:
    return math.floor(x + _EPS)


def _ceil(x: float) -> int:
    return math.ceil(x - _EPS)


def partition(ranked: ScoreTable, fractions=FRACTIONS) -> list[list[str]]:
    """Contiguous slices of the easy-to-hard ranking."""
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be positive and sum to 1, got {fractions}")
    ids = ranked.ids
    n = len(ids)
    if n == 0:
        raise ValueError("empty score table")
    if n < len(fractions):
        raise ValueError(f"need at least {len(fractions)} scans for {len(fractions)} batches, got {n}")
    sizes = [max(1, _floor(f * n)) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if sizes[-1] < 1:
        raise ValueError(f"fractions {fractions} leave no scans for the last batch of {n}")
    out, start = [], 0
    for size in sizes:
        out.append(ids[start : start + size])
        start += size
    return out


def apply_overlap(batches, overlap_frac: float = 0.15, seed: int = 0) -> list[list[str]]:
    """Append to batch k a seeded sample of earlier batches' scans (``ceil(frac * |k|)``, clamped)."""
    if overlap_frac < 0:
        raise ValueError("overlap fraction must be non-negative")
    out = [list(batches[0])] if batches else []
    for k in range(1, len(batches)):
        pool = [i for b in batches[:k] for i in b]
        want = min(_ceil(overlap_frac * len(batches[k])), len(pool))
        picked = Stream.from_seed(seed, "overlap", k).sample(pool, want) if want else []
        out.append(list(batches[k]) + picked)
    return out


def compose(ranked: ScoreTable, strategy: str, epochs=EPOCHS, overlap_frac: float = 0.15,
            mixed_frac: float = 0.15, seed: int = 0, fractions=FRACTIONS) -> Schedule:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if len(ranked) == 0:
        raise ValueError("empty score table")
    epochs = [int(e) for e in epochs]
    if len(epochs) != len(fractions):
        raise ValueError("need one epoch count per batch")
    digest = ranked.digest()

    if strategy == "no_cl":
        ids = list(ranked.ids)
        Stream.from_seed(seed, "shuffle", 0).shuffle(ids)
        return Schedule((Phase(0, tuple(ids), sum(epochs)),), strategy, seed, digest)

    cores = partition(ranked, fractions)
    if strategy == "reverse":
        cores = cores[::-1]
    phased = apply_overlap(cores, overlap_frac, seed)
    position = {sid: k for k, sid in enumerate(ranked.ids)}

    phases = []
    for k, (core, members) in enumerate(zip(cores, phased)):
        members = list(members)
        overlap = members[len(core) :]
        mixed: list[str] = []
        if strategy == "mixed" and k < len(cores) - 1:
            hardest = max(position[i] for i in core)
            taken = set(members)
            pool = [i for i in ranked.ids[hardest + 1 :] if i not in taken]
            want = min(_ceil(mixed_frac * len(members)), len(pool))
            mixed = Stream.from_seed(seed, "mixed", k).sample(pool, want) if want else []
            members += mixed
        Stream.from_seed(seed, "shuffle", k).shuffle(members)
        phases.append(
            Phase(k, tuple(members), epochs[k], tuple(overlap), tuple(mixed) if strategy == "mixed" else None)
        )
    return Schedule(tuple(phases), strategy, seed, digest)
