"""Answer and caption normalisation shared by the metrics."""
from __future__ import annotations

import re
import string
from typing import List

_PUNCT = re.compile("[" + re.escape(string.punctuation) + "]")
_ARTICLES = {"a", "an", "the"}


def tokenize(text: str) -> List[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT.sub(" ", str(text).lower()).split()


def normalize_answer(text: str) -> str:
    return " ".join(w for w in tokenize(text) if w not in _ARTICLES)
