"""VQA score, exact match, accuracy and option-constrained multiple choice."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Mapping, Sequence, Union

from .text import normalize_answer


class EmptyOptionsError(ValueError):
    pass


@dataclass
class VQARecord:
    question: str
    answers: List[str]
    prediction: str

    def __post_init__(self):
        if not self.answers:
            raise ValueError(f"VQA record {self.question!r} has no ground-truth answers")


def vqa_score(record: VQARecord) -> float:
    """min(#ground-truth answers equal to the prediction / 3, 1) after normalisation."""
    pred = normalize_answer(record.prediction)
    matches = sum(normalize_answer(a) == pred for a in record.answers)
    return min(matches / 3.0, 1.0)


def exact_match(prediction: str, target: str) -> int:
    return int(normalize_answer(prediction) == normalize_answer(target))


def accuracy(records: Sequence) -> float:
    """Mean exact match over (prediction, target) pairs."""
    records = list(records)
    if not records:
        raise ValueError("accuracy of an empty record set is undefined")
    return sum(exact_match(p, t) for p, t in records) / len(records)


def choose_option(options: Sequence[str], score: Union[Mapping[str, float], Callable[[str], float]]) -> str:
    """Constrain a prediction to the option set: the option with the highest model score wins.

    Ties go to the earlier option.
    """
    options = list(options)
    if not options:
        raise EmptyOptionsError("multiple-choice question has no options")
    fn = score.__getitem__ if isinstance(score, Mapping) else score
    best, best_score = options[0], float(fn(options[0]))
    for opt in options[1:]:
        s = float(fn(opt))
        if s > best_score:
            best, best_score = opt, s
    return best


def multichoice_accuracy(items: Sequence) -> float:
    """items: (options, score, target) triples."""
    items = list(items)
    if not items:
        raise ValueError("accuracy of an empty record set is undefined")
    return accuracy([(choose_option(o, s), t) for o, s, t in items])
