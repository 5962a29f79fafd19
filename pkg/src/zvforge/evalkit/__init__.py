from .cider import CaptionCorpus, CiderError, CiderResult, cider
from .judged import (JUDGES, PUBLISHED_ROWS, AverageCheck, Category, ConstantJudge, JudgedInstance, JudgedReport,
                     JudgeScoreError, LengthRatioJudge, TokenOverlapJudge, check_reported_averages, format_table,
                     judged_benchmark)
from .retrieval import retrieval_at_k
from .text import normalize_answer, tokenize
from .vqa import (EmptyOptionsError, VQARecord, accuracy, choose_option, exact_match, multichoice_accuracy,
                  vqa_score)
