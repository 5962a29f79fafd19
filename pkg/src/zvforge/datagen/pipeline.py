"""Job execution: prompt, call the teacher with retries, parse, filter, route to pass/reject/failed."""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .filters import apply_filters
from .parser import ParseError, parse_fenced
from .prompts import build_prompt
from .types import (DatagenResult, Exemplar, FailedJob, GenerationJob, InstructionResponsePair, JobError,
                    JobKind, Provenance, RejectEntry, SymbolicImage)

DEFAULT_TIMESTAMP = "1970-01-01T00:00:00Z"


class RateLimiter:
    """At most ``rate`` calls per second across threads."""

    def __init__(self, rate: Optional[float]):
        self.interval = 0.0 if not rate else 1.0 / rate
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            time.sleep(start - now)


def _turns(rec):
    t = rec.get("turns")
    return None if t is None else tuple((x["from"], x["value"]) for x in t)


def run_job(job: GenerationJob, client, parser: Callable = parse_fenced, retries: int = 2,
            timestamp: str = DEFAULT_TIMESTAMP, limiter: Optional[RateLimiter] = None,
            origin: Optional[Provenance] = None, filter_kind: Optional[JobKind] = None) -> DatagenResult:
    """Run one job; the result accounts for it exactly once in job_status."""
    out = DatagenResult()
    try:
        system, messages = build_prompt(job)
    except JobError as exc:
        out.failed.append(FailedJob(job.job_id, str(exc), 0))
        out.job_status[job.job_id] = "failed"
        return out
    raw, error, attempts = None, None, 0
    for attempts in range(1, retries + 2):
        if limiter is not None:
            limiter.wait()
        try:
            raw = client.complete(system, messages)
            break
        except Exception as exc:  # any client failure is retried, then recorded
            error = f"{type(exc).__name__}: {exc}"
    if raw is None:
        out.failed.append(FailedJob(job.job_id, error or "no output", attempts))
        out.job_status[job.job_id] = "failed"
        return out
    try:
        records = parser(raw)
    except ParseError as exc:
        out.rejected.append(RejectEntry(job.job_id, f"parse: {exc}", raw))
        out.job_status[job.job_id] = "rejected"
        return out
    prov = Provenance(job_id=job.job_id, kind=job.kind, rewrite=job.rewrite,
                      exemplar_ids=tuple(e.id for e in job.exemplars), client_id=client.identity,
                      timestamp=timestamp, origin=origin)
    for rec in records:
        pair = InstructionResponsePair(rec["instruction"], rec["response"], job.target_language,
                                       job.source_image_id, prov, None, _turns(rec))
        verdict = apply_filters(pair, kind=filter_kind or job.kind, target_language=job.target_language)
        pair = pair.with_verdict(verdict)
        if verdict.passed:
            out.passed.append(pair)
        else:
            out.rejected.append(RejectEntry(job.job_id, "filter", raw, pair, verdict.failed_rules))
    out.job_status[job.job_id] = "passed" if out.passed else "rejected"
    return out


def _collect(results: Iterable[DatagenResult]) -> DatagenResult:
    total = DatagenResult()
    for r in results:
        total.extend(r)
    return total


def generate_pairs(jobs: Sequence[GenerationJob], client, parser: Callable = parse_fenced, retries: int = 2,
                   workers: int = 1, rate_limit: Optional[float] = None,
                   timestamp: str = DEFAULT_TIMESTAMP) -> DatagenResult:
    """Run all jobs; results are reduced in job order whatever the worker count."""
    limiter = RateLimiter(rate_limit)

    def one(job):
        return run_job(job, client, parser, retries, timestamp, limiter)

    if workers <= 1:
        return _collect(one(j) for j in jobs)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return _collect(list(pool.map(one, jobs)))


def translation_job(source: InstructionResponsePair, target_language: str = "zh") -> GenerationJob:
    return GenerationJob(job_id=f"{source.provenance.job_id}/translate-{target_language}",
                         kind=JobKind.TRANSLATION, exemplars=(), query=source, target_language=target_language)


def translate_pair(source: InstructionResponsePair, client, target_language: str = "zh", retries: int = 2,
                   timestamp: str = DEFAULT_TIMESTAMP, parser: Callable = parse_fenced) -> DatagenResult:
    """Translate a passed pair; the output provenance chains back to the source job."""
    if source.verdict is not None and not source.verdict.passed:
        raise ValueError(f"source pair of job {source.provenance.job_id} did not pass the filters")
    return run_job(translation_job(source, target_language), client, parser, retries, timestamp,
                   origin=source.provenance, filter_kind=source.provenance.kind)


def translate_pairs(sources: Sequence[InstructionResponsePair], client, target_language: str = "zh",
                    retries: int = 2, workers: int = 1, timestamp: str = DEFAULT_TIMESTAMP) -> DatagenResult:
    """Translate a batch; job ids are made unique per source position."""
    sources = list(sources)
    for i, src in enumerate(sources):
        if src.verdict is not None and not src.verdict.passed:
            raise ValueError(f"source pair {i} did not pass the filters")

    def one(args):
        i, src = args
        job = GenerationJob(f"{translation_job(src, target_language).job_id}#{i}", JobKind.TRANSLATION,
                            (), src, None, target_language)
        return run_job(job, client, parse_fenced, retries, timestamp, origin=src.provenance,
                       filter_kind=src.provenance.kind)

    if workers <= 1:
        return _collect(one(a) for a in enumerate(sources))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return _collect(list(pool.map(one, enumerate(sources))))


def select_exemplars(pool: Sequence[Exemplar], kind: JobKind, k: int, rng: np.random.Generator) -> List[Exemplar]:
    """Seeded choice of k exemplars, preferring those of the same kind."""
    same = [e for e in pool if e.kind is JobKind(kind)]
    src = same if len(same) >= k else list(pool)
    if not 1 <= k <= len(src):
        raise JobError(f"cannot draw {k} exemplars from a pool of {len(src)}")
    idx = rng.choice(len(src), size=k, replace=False)
    return [src[i] for i in sorted(idx)]


def make_jobs(images: Sequence[SymbolicImage], pool: Sequence[Exemplar], kind, rewrite=None, k: int = 2,
              seed: int = 0, target_language: str = "en") -> List[GenerationJob]:
    rng = np.random.default_rng([seed, 31])
    kind = JobKind(kind)
    return [GenerationJob(job_id=f"{kind.value}-{i:06d}-{img.image_id}", kind=kind,
                          exemplars=tuple(select_exemplars(pool, kind, k, rng)), query=img,
                          rewrite=rewrite, target_language=target_language)
            for i, img in enumerate(images)]
