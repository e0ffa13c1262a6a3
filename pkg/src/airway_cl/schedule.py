"""Training schedules and their JSON manifest.

A schedule is an ordered list of phases; an external training loop runs
``epochs`` epochs over ``scan_ids`` for each phase in turn. Manifest::

    {
      "version": 1,
      "strategy": "vanilla",
      "seed": 0,
      "score_digest": "<16 hex digits>",
      "phases": [
        {"index": 0, "epochs": 20, "scan_ids": [...],
         "overlap_ids": [...], "mixed_ids": [...],   # curriculum phases
         "domain_mix": {"source": 5, "target": 0}}   # adaptation phases
      ]
    }

``score_digest`` is the BLAKE2b-64 hex digest of the canonical score-table
CSV bytes the schedule was derived from (for adaptation schedules, the
target table CSV followed by the source table CSV).
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

MANIFEST_VERSION = 1
_DIGEST = re.compile(r"^[0-9a-f]{16}$")


class ManifestError(ValueError):
    """Raised when a manifest is malformed or does not match its score table."""


@dataclass(frozen=True)
class Phase:
    index: int
    scan_ids: tuple[str, ...]
    epochs: int
    overlap_ids: tuple[str, ...] | None = None
    mixed_ids: tuple[str, ...] | None = None
    domain_mix: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "scan_ids", tuple(self.scan_ids))
        if len(set(self.scan_ids)) != len(self.scan_ids):
            raise ValueError(f"phase {self.index} repeats a scan id")
        if self.epochs < 1:
            raise ValueError(f"phase {self.index} needs at least one epoch")
        for name in ("overlap_ids", "mixed_ids"):
            extra = getattr(self, name)
            if extra is not None:
                object.__setattr__(self, name, tuple(extra))
                if not set(extra) <= set(self.scan_ids):
                    raise ValueError(f"phase {self.index}: {name} not a subset of scan_ids")

    @property
    def core_ids(self) -> tuple[str, ...]:
        added = set(self.overlap_ids or ()) | set(self.mixed_ids or ())
        return tuple(i for i in self.scan_ids if i not in added)

    def to_dict(self) -> dict:
        doc = {"index": self.index, "epochs": self.epochs, "scan_ids": list(self.scan_ids)}
        if self.overlap_ids is not None:
            doc["overlap_ids"] = list(self.overlap_ids)
        if self.mixed_ids is not None:
            doc["mixed_ids"] = list(self.mixed_ids)
        if self.domain_mix is not None:
            doc["domain_mix"] = {"source": self.domain_mix[0], "target": self.domain_mix[1]}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> Phase:
        mix = doc.get("domain_mix")
        return cls(
            int(doc["index"]),
            tuple(doc["scan_ids"]),
            int(doc["epochs"]),
            tuple(doc["overlap_ids"]) if "overlap_ids" in doc else None,
            tuple(doc["mixed_ids"]) if "mixed_ids" in doc else None,
            (int(mix["source"]), int(mix["target"])) if mix is not None else None,
        )


@dataclass(frozen=True)
class Schedule:
    phases: tuple[Phase, ...]
    strategy: str
    seed: int
    score_digest: str

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        if [p.index for p in self.phases] != list(range(len(self.phases))):
            raise ValueError("phase indices must run 0..n-1")

    @property
    def total_epochs(self) -> int:
        return sum(p.epochs for p in self.phases)

    def all_ids(self) -> set[str]:
        return {i for p in self.phases for i in p.scan_ids}

    def to_json(self) -> str:
        doc = {
            "version": MANIFEST_VERSION,
            "strategy": self.strategy,
            "seed": int(self.seed),
            "score_digest": self.score_digest,
            "phases": [p.to_dict() for p in self.phases],
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str, expected_digest: str | None = None) -> Schedule:
        try:
            doc = json.loads(text)
            if doc.get("version") != MANIFEST_VERSION:
                raise ManifestError(f"unsupported manifest version {doc.get('version')!r}")
            digest = doc["score_digest"]
            if not isinstance(digest, str) or not _DIGEST.match(digest):
                raise ManifestError(f"malformed score digest {digest!r}")
            schedule = cls(
                tuple(Phase.from_dict(p) for p in doc["phases"]),
                str(doc["strategy"]),
                int(doc["seed"]),
                digest,
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from None
        except ManifestError:
            raise
        except ValueError as exc:
            raise ManifestError(f"invalid manifest: {exc}") from None
        if expected_digest is not None and schedule.score_digest != expected_digest:
            raise ManifestError(
                f"score digest mismatch: manifest has {schedule.score_digest}, scores give {expected_digest}"
            )
        return schedule


def emit(schedule: Schedule, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(schedule.to_json(), encoding="utf-8")
    return path


def load_schedule(path, scores=None) -> Schedule:
    """Read a manifest; with ``scores`` (a ScoreTable or digest string) the digest is verified."""
    expected = scores if isinstance(scores, str) or scores is None else scores.digest()
    return Schedule.from_json(Path(path).read_text(encoding="utf-8"), expected)
