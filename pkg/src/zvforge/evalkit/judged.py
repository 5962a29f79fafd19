"""Three-category judged benchmark: conversation, detail description, complex reasoning."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

from .text import tokenize


class Category(str, enum.Enum):
    CONVERSATION = "Conversation"
    DETAIL = "DetailDescription"
    REASONING = "ComplexReasoning"


CATEGORY_COLUMNS = {Category.CONVERSATION: "Con", Category.DETAIL: "DD", Category.REASONING: "CR"}


class JudgeScoreError(ValueError):
    pass


@dataclass
class JudgedInstance:
    id: str
    category: Category
    context: str
    question: str
    reference: str
    candidate: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        self.category = Category(self.category)
        if self.score is not None and not 0.0 <= self.score <= 100.0:
            raise JudgeScoreError(f"instance {self.id}: score {self.score} outside [0, 100]")


class Judge(Protocol):
    def score(self, context: str, question: str, reference: str, candidate: str) -> float: ...


class ConstantJudge:
    def __init__(self, value: float = 80.0):
        self.value = float(value)

    def score(self, context, question, reference, candidate) -> float:
        return self.value


class LengthRatioJudge:
    """100 * shorter / longer token count of candidate vs reference."""

    def score(self, context, question, reference, candidate) -> float:
        a, b = len(tokenize(candidate)), len(tokenize(reference))
        if max(a, b) == 0:
            return 100.0
        return 100.0 * min(a, b) / max(a, b)


class TokenOverlapJudge:
    """100 * F1 of candidate and reference token sets."""

    def score(self, context, question, reference, candidate) -> float:
        c, r = set(tokenize(candidate)), set(tokenize(reference))
        common = len(c & r)
        if common == 0:
            return 0.0
        p, q = common / len(c), common / len(r)
        return 100.0 * 2 * p * q / (p + q)


JUDGES = {"mock-constant": ConstantJudge, "mock-length": LengthRatioJudge, "mock-overlap": TokenOverlapJudge}


@dataclass
class JudgedReport:
    means: Dict[str, Optional[float]]
    avg: Optional[float]
    scored: int
    unscored: int
    instances: List[JudgedInstance] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def avg_rounded(self) -> Optional[float]:
        return None if self.avg is None else round(self.avg, 1)

    def row(self) -> Tuple[Optional[float], ...]:
        return tuple(self.means[CATEGORY_COLUMNS[c]] for c in Category) + (self.avg,)

    def table(self, name: str = "model") -> str:
        return format_table([(name, *self.row())])

    def to_json(self) -> str:
        doc = {"means": self.means, "avg": self.avg, "avg_rounded": self.avg_rounded,
               "scored": self.scored, "unscored": self.unscored, "warnings": self.warnings}
        return json.dumps(doc, sort_keys=True, indent=2)


def judged_benchmark(instances: Sequence[JudgedInstance], candidate_answers, judge: Judge) -> JudgedReport:
    """Score each instance with the judge; AVG is the unweighted mean of the category means.

    candidate_answers maps instance id to answer (a sequence is taken positionally).
    Instances without a candidate are left unscored and counted in the warnings.
    """
    if not isinstance(candidate_answers, Mapping):
        candidate_answers = {inst.id: c for inst, c in zip(instances, candidate_answers)}
    scored: List[JudgedInstance] = []
    out: List[JudgedInstance] = []
    warnings: List[str] = []
    for inst in instances:
        cand = candidate_answers.get(inst.id)
        if cand is None:
            warnings.append(f"instance {inst.id}: no candidate answer, left unscored")
            out.append(JudgedInstance(inst.id, inst.category, inst.context, inst.question, inst.reference))
            continue
        s = float(judge.score(inst.context, inst.question, inst.reference, cand))
        done = JudgedInstance(inst.id, inst.category, inst.context, inst.question, inst.reference, cand, s)
        scored.append(done)
        out.append(done)
    means: Dict[str, Optional[float]] = {}
    for cat in Category:
        vals = [i.score for i in scored if i.category is cat]
        means[CATEGORY_COLUMNS[cat]] = sum(vals) / len(vals) if vals else None
    present = [m for m in means.values() if m is not None]
    if 0 < len(present) < len(Category):
        warnings.append("AVG computed over the categories that have scored instances only")
    avg = sum(present) / len(present) if present else None
    return JudgedReport(means=means, avg=avg, scored=len(scored), unscored=len(out) - len(scored),
                        instances=out, warnings=warnings)


def _cell(v) -> str:
    return "-" if v is None else f"{v:.1f}"


def format_table(rows: Sequence[Tuple]) -> str:
    """Aligned text table: name | Con | DD | CR | AVG."""
    header = ("Model", "Con", "DD", "CR", "AVG")
    body = [(str(r[0]),) + tuple(_cell(v) for v in r[1:5]) for r in rows]
    widths = [max(len(x[i]) for x in [header] + body) for i in range(5)]
    lines = [" | ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(line, widths)))
             for line in [header] + body]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)


# Published judged-benchmark rows: (model, language, Con, DD, CR, printed AVG).
PUBLISHED_ROWS = [
    ("MiniGPT-4", "en", 65.0, 67.3, 76.6, 69.7),
    ("InstructBLIP", "en", 81.9, 68.0, 91.2, 80.5),
    ("LLaVA", "en", 89.5, 70.4, 96.2, 85.6),
    ("mPLUG-Owl", "en", 64.6, 47.7, 80.1, 64.2),
    ("VisualGLM", "en", 62.4, 63.0, 80.6, 68.7),
    ("VisCPM-Chat", "en", 81.4, 69.2, 93.1, 81.4),
    ("Ziya-Visual-Base", "en", 82.7, 69.9, 92.1, 81.7),
    ("Ziya-Visual-Chat", "en", 84.2, 71.4, 96.6, 84.1),
    ("mPLUG-Owl", "zh", 76.3, 61.2, 77.8, 72.0),
    ("VisualGLM", "zh", 76.6, 87.8, 83.6, 82.7),
    ("VisCPM-Chat", "zh", 90.0, 87.4, 95.0, 90.9),
    ("Ziya-Visual-Base", "zh", 85.0, 74.7, 82.4, 80.8),
    ("Ziya-Visual-Chat", "zh", 90.9, 81.3, 88.0, 86.7),
]


@dataclass
class AverageCheck:
    name: str
    language: str
    printed: float
    recomputed: float
    flagged: bool

    @property
    def deviation(self) -> float:
        return self.printed - self.recomputed


def check_reported_averages(rows: Sequence[Tuple] = PUBLISHED_ROWS, tol: float = 0.05) -> List[AverageCheck]:
    """Recompute each row's unweighted category mean and flag printed AVGs off by more than tol."""
    out = []
    for name, lang, con, dd, cr, printed in rows:
        mean = (con + dd + cr) / 3.0
        out.append(AverageCheck(name, lang, printed, mean, abs(printed - mean) > tol + 1e-12))
    return out
