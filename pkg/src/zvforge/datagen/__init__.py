from .cleaning import CleanResult, HashingScorer, SimilarityScorer, TableScorer, clean_corpus, crafted_corpus
from .clients import (EchoTranslator, FailingEveryNthClient, HttpTeacherClient, MockTeacherClient, ProseClient,
                      TeacherClient, TeacherError, pseudo_cjk)
from .filters import DEFAULT_RULES, apply_filters
from .parser import ParseError, parse_fenced
from .pipeline import generate_pairs, make_jobs, run_job, select_exemplars, translate_pair, translate_pairs
from .prompts import build_prompt, serialize_boxes, system_message
from .types import (Box, DatagenResult, Exemplar, FailedJob, GenerationJob, InstructionResponsePair, JobError,
                    JobKind, Provenance, RecordError, RejectEntry, Rewrite, SymbolicImage, Verdict)
