"""Records flowing through the instruction-data pipeline."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union


class JobKind(str, enum.Enum):
    CONVERSATION = "Conversation"
    DETAIL = "DetailDescription"
    REASONING = "ComplexReasoning"
    TRANSLATION = "Translation"


class Rewrite(str, enum.Enum):
    DEEPENING = "Deepening"
    CONCRETIZING = "Concretizing"
    INCREASING_REASONING = "IncreasingReasoning"
    ADDING_CONSTRAINTS = "AddingConstraints"


LANGUAGES = ("en", "zh")
MAX_EXEMPLARS = 8


class RecordError(ValueError):
    pass


class JobError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    tag: str
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not 0.0 <= v <= 1.0:
                raise RecordError(f"box {self.tag!r}: coordinate {v} outside [0, 1]")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise RecordError(f"box {self.tag!r}: need x1 < x2 and y1 < y2, got {self.coords}")

    @property
    def coords(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_dict(self) -> dict:
        return {"tag": self.tag, "box": list(self.coords)}

    @classmethod
    def from_dict(cls, d: dict) -> "Box":
        try:
            return cls(d["tag"], *[float(v) for v in d["box"]])
        except (KeyError, TypeError) as exc:
            raise RecordError(f"malformed box record {d!r}: {exc}") from None


@dataclass(frozen=True)
class SymbolicImage:
    image_id: str
    captions: Tuple[str, ...]
    boxes: Tuple[Box, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "captions", tuple(self.captions))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if not self.captions or not all(c.strip() for c in self.captions):
            raise RecordError(f"image {self.image_id}: captions must be non-empty")

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "captions": list(self.captions),
                "boxes": [b.to_dict() for b in self.boxes]}

    @classmethod
    def from_dict(cls, d: dict) -> "SymbolicImage":
        if "image_id" not in d or "captions" not in d:
            raise RecordError(f"image record needs image_id and captions: {sorted(d)}")
        return cls(str(d["image_id"]), tuple(d["captions"]),
                   tuple(Box.from_dict(b) for b in d.get("boxes", [])))


@dataclass(frozen=True)
class Exemplar:
    id: str
    image: SymbolicImage
    instruction: str
    response: str
    kind: JobKind = JobKind.CONVERSATION
    turns: Optional[Tuple[Tuple[str, str], ...]] = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "image": self.image.to_dict(), "instruction": self.instruction,
             "response": self.response, "kind": JobKind(self.kind).value}
        if self.turns is not None:
            d["turns"] = [{"from": s, "value": v} for s, v in self.turns]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Exemplar":
        turns = d.get("turns")
        return cls(d["id"], SymbolicImage.from_dict(d["image"]), d["instruction"], d["response"],
                   JobKind(d.get("kind", JobKind.CONVERSATION.value)),
                   None if turns is None else tuple((t["from"], t["value"]) for t in turns))


@dataclass(frozen=True)
class Provenance:
    job_id: str
    kind: JobKind
    rewrite: Optional[Rewrite]
    exemplar_ids: Tuple[str, ...]
    client_id: str
    timestamp: str
    origin: Optional["Provenance"] = None

    def chain(self) -> List["Provenance"]:
        """Oldest first."""
        out, p = [], self
        while p is not None:
            out.append(p)
            p = p.origin
        return out[::-1]

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "kind": JobKind(self.kind).value,
                "rewrite": None if self.rewrite is None else Rewrite(self.rewrite).value,
                "exemplar_ids": list(self.exemplar_ids), "client_id": self.client_id,
                "timestamp": self.timestamp,
                "origin": None if self.origin is None else self.origin.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(d["job_id"], JobKind(d["kind"]), None if d["rewrite"] is None else Rewrite(d["rewrite"]),
                   tuple(d["exemplar_ids"]), d["client_id"], d["timestamp"],
                   None if d.get("origin") is None else cls.from_dict(d["origin"]))


@dataclass(frozen=True)
class Verdict:
    passed: bool
    failed_rules: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failed_rules": list(self.failed_rules)}

    @classmethod
    def from_dict(cls, d: dict) -> "Verdict":
        return cls(bool(d["passed"]), tuple(d["failed_rules"]))


@dataclass(frozen=True)
class InstructionResponsePair:
    instruction: str
    response: str
    language: str
    source_image_id: str
    provenance: Provenance
    verdict: Optional[Verdict] = None
    turns: Optional[Tuple[Tuple[str, str], ...]] = None

    def with_verdict(self, verdict: Verdict) -> "InstructionResponsePair":
        return InstructionResponsePair(self.instruction, self.response, self.language, self.source_image_id,
                                       self.provenance, verdict, self.turns)

    def to_dict(self) -> dict:
        if self.provenance is None:
            raise RecordError("pair has no provenance and cannot be persisted")
        return {"instruction": self.instruction, "response": self.response, "language": self.language,
                "source_image_id": self.source_image_id, "provenance": self.provenance.to_dict(),
                "filter_verdict": None if self.verdict is None else self.verdict.to_dict(),
                "turns": None if self.turns is None else [{"from": s, "value": v} for s, v in self.turns]}

    @classmethod
    def from_dict(cls, d: dict) -> "InstructionResponsePair":
        turns = d.get("turns")
        verdict = d.get("filter_verdict")
        return cls(d["instruction"], d["response"], d["language"], d["source_image_id"],
                   Provenance.from_dict(d["provenance"]),
                   None if verdict is None else Verdict.from_dict(verdict),
                   None if turns is None else tuple((t["from"], t["value"]) for t in turns))


@dataclass(frozen=True)
class GenerationJob:
    job_id: str
    kind: JobKind
    exemplars: Tuple[Exemplar, ...]
    query: Union[SymbolicImage, InstructionResponsePair]
    rewrite: Optional[Rewrite] = None
    target_language: str = "en"

    def __post_init__(self):
        object.__setattr__(self, "kind", JobKind(self.kind))
        object.__setattr__(self, "exemplars", tuple(self.exemplars))
        if self.rewrite is not None:
            object.__setattr__(self, "rewrite", Rewrite(self.rewrite))

    def validate(self) -> None:
        if self.target_language not in LANGUAGES:
            raise JobError(f"job {self.job_id}: target_language must be one of {LANGUAGES}")
        if self.kind is JobKind.TRANSLATION:
            if not isinstance(self.query, InstructionResponsePair):
                raise JobError(f"job {self.job_id}: a Translation job needs a source pair, not a bare image")
            if self.exemplars:
                raise JobError(f"job {self.job_id}: Translation jobs are zero-shot and take no exemplars")
            return
        if not isinstance(self.query, SymbolicImage):
            raise JobError(f"job {self.job_id}: {self.kind.value} job needs a SymbolicImage query")
        if not self.exemplars:
            raise JobError(f"job {self.job_id}: no exemplars")
        if len(self.exemplars) > MAX_EXEMPLARS:
            raise JobError(f"job {self.job_id}: {len(self.exemplars)} exemplars, at most {MAX_EXEMPLARS}")

    @property
    def source_image_id(self) -> str:
        q = self.query
        return q.image_id if isinstance(q, SymbolicImage) else q.source_image_id


@dataclass(frozen=True)
class RejectEntry:
    job_id: str
    reason: str
    raw: str
    pair: Optional[InstructionResponsePair] = None
    failed_rules: Tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "reason": self.reason, "raw": self.raw,
                "pair": None if self.pair is None else self.pair.to_dict(),
                "failed_rules": list(self.failed_rules)}


@dataclass(frozen=True)
class FailedJob:
    job_id: str
    error: str
    attempts: int

    def to_dict(self) -> dict:
        return {"job_id": self.job_id, "error": self.error, "attempts": self.attempts}


@dataclass
class DatagenResult:
    passed: List[InstructionResponsePair] = field(default_factory=list)
    rejected: List[RejectEntry] = field(default_factory=list)
    failed: List[FailedJob] = field(default_factory=list)
    job_status: dict = field(default_factory=dict)

    def counts(self) -> dict:
        status = list(self.job_status.values())
        return {"jobs": len(status), "jobs_passed": status.count("passed"),
                "jobs_rejected": status.count("rejected"), "jobs_failed": status.count("failed"),
                "pairs_passed": len(self.passed), "pairs_rejected": len(self.rejected)}

    def extend(self, other: "DatagenResult") -> None:
        self.passed += other.passed
        self.rejected += other.rejected
        self.failed += other.failed
        overlap = set(self.job_status) & set(other.job_status)
        if overlap:
            raise JobError(f"duplicate job ids {sorted(overlap)[:3]}")
        self.job_status.update(other.job_status)
