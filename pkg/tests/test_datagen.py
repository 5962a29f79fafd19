import json
import random

import pytest
from hypothesis import given, strategies as st

from zvforge.datagen import (DEFAULT_RULES, Box, EchoTranslator, Exemplar, FailingEveryNthClient,
                             GenerationJob, HashingScorer, InstructionResponsePair, JobError, JobKind,
                             MockTeacherClient, ParseError, ProseClient, Provenance, RecordError, Rewrite,
                             SymbolicImage, TeacherError, apply_filters, build_prompt, clean_corpus,
                             crafted_corpus, generate_pairs, make_jobs, parse_fenced, pseudo_cjk,
                             serialize_boxes, system_message, translate_pair, translate_pairs)
from zvforge.datagen.io import load_seed_exemplars, read_jsonl, read_pairs, write_jsonl
from zvforge.datagen.prompts import fenced
from zvforge.datagen.synthetic import synthetic_images


@pytest.fixture(scope="module")
def pool():
    return load_seed_exemplars()


@pytest.fixture(scope="module")
def images():
    return synthetic_images(30, seed=4)


def prov(kind=JobKind.CONVERSATION):
    return Provenance("job-1", kind, None, ("ex-1",), "test", "1970-01-01T00:00:00Z")


def pair(instruction="What is in the picture?", response="A dog on a bench.", language="en",
         kind=JobKind.DETAIL, turns=None):
    return InstructionResponsePair(instruction, response, language, "img-1", prov(kind), None, turns)


# -- types -----------------------------------------------------------------------------------

def test_box_validity():
    with pytest.raises(RecordError):
        Box("dog", 0.5, 0.1, 0.4, 0.3)
    with pytest.raises(RecordError):
        SymbolicImage("i", (), ())


def test_seed_pool_has_fifty_distinct(pool, images):
    assert len(pool) == 50 and len({e.id for e in pool}) == 50
    assert {k for k in JobKind if k is not JobKind.TRANSLATION} <= {e.kind for e in pool}
    assert not {e.image.image_id for e in pool} & {im.image_id for im in images}


def test_job_validation(pool, images):
    GenerationJob("a", JobKind.CONVERSATION, pool[:8], images[0]).validate()
    with pytest.raises(JobError, match="no exemplars"):
        build_prompt(GenerationJob("a", JobKind.CONVERSATION, (), images[0]))
    with pytest.raises(JobError, match="at most 8"):
        GenerationJob("a", JobKind.CONVERSATION, pool[:9], images[0]).validate()
    with pytest.raises(JobError, match="source pair"):
        build_prompt(GenerationJob("a", JobKind.TRANSLATION, (), images[0]))


# -- prompts ---------------------------------------------------------------------------------

def test_prompt_roles(pool, images):
    _, msgs = build_prompt(GenerationJob("a", JobKind.CONVERSATION, pool[:1], images[0]))
    assert [m["role"] for m in msgs] == ["user", "assistant", "user"]
    _, msgs = build_prompt(GenerationJob("a", JobKind.CONVERSATION, pool[:3], images[0]))
    assert [m["role"] for m in msgs] == ["user", "assistant"] * 3 + ["user"]


def test_system_message_composition():
    plain = system_message(JobKind.CONVERSATION)
    deep = system_message(JobKind.CONVERSATION, Rewrite.DEEPENING)
    clause = system_message(JobKind.DETAIL, Rewrite.DEEPENING).split("\n\n")[1]
    assert deep.startswith(plain.rsplit("\n\n", 1)[0]) and clause in deep
    assert plain.endswith("Write all text in English.")
    assert system_message(JobKind.REASONING, target_language="zh").endswith("Write all text in Chinese.")
    assert len({system_message(k) for k in JobKind}) == 4
    assert len({system_message(JobKind.DETAIL, r) for r in Rewrite}) == 4


def test_box_serialization():
    im = SymbolicImage("i", ("a cat",), (Box("cat", 0.1, 0.25, 0.5, 0.755),))
    assert serialize_boxes(im) == "cat:(0.100,0.250,0.500,0.755)"


def test_prompt_determinism(pool, images):
    a = GenerationJob("x", JobKind.REASONING, pool[2:4], images[1], Rewrite.CONCRETIZING)
    b = GenerationJob("x", JobKind.REASONING, pool[2:4], images[1], Rewrite.CONCRETIZING)
    assert json.dumps(build_prompt(a)).encode() == json.dumps(build_prompt(b)).encode()


def test_rewrite_not_applied_to_translation():
    src = pair()
    job = GenerationJob("t", JobKind.TRANSLATION, (), src, Rewrite.DEEPENING, "zh")
    assert build_prompt(job)[0] == system_message(JobKind.TRANSLATION, None, "zh")


# -- parser ----------------------------------------------------------------------------------

def test_parse_fenced():
    assert parse_fenced("noise\n" + fenced([{"instruction": "a", "response": "b"}]) + "\ntail") == \
        [{"instruction": "a", "response": "b"}]
    assert parse_fenced(fenced({"instruction": "a", "response": "b"}))[0]["response"] == "b"
    for bad in ("no block here", "```json\n{oops\n```", "```json\n[]\n```", "```json\n[{\"instruction\": 1}]\n```"):
        with pytest.raises(ParseError):
            parse_fenced(bad)


# -- generation ------------------------------------------------------------------------------

def test_happy_path_full_provenance(pool, images):
    jobs = make_jobs(images[:1], pool, JobKind.DETAIL, k=2, seed=0)
    res = generate_pairs(jobs, MockTeacherClient())
    assert len(res.passed) == 1 and not res.rejected and not res.failed
    p = res.passed[0].provenance
    assert p.kind is JobKind.DETAIL and len(p.exemplar_ids) == 2 and p.client_id == "mock-teacher-v1"
    assert p.timestamp == "1970-01-01T00:00:00Z" and res.passed[0].source_image_id == images[0].image_id


def test_prose_goes_to_reject(pool, images):
    res = generate_pairs(make_jobs(images[:1], pool, JobKind.DETAIL), ProseClient())
    assert not res.passed and len(res.rejected) == 1
    assert res.rejected[0].reason.startswith("parse") and res.rejected[0].raw


def test_conservation_with_flaky_client(pool, images):
    jobs = make_jobs(synthetic_images(100, seed=9), pool, JobKind.CONVERSATION, seed=1)
    res = generate_pairs(jobs, FailingEveryNthClient(MockTeacherClient(), 3), retries=0)
    c = res.counts()
    assert c["jobs"] == 100 == c["jobs_passed"] + c["jobs_rejected"] + c["jobs_failed"]
    assert set(res.job_status) == {j.job_id for j in jobs}
    assert c["jobs_failed"] > 0


def test_retries_recover(pool, images):
    jobs = make_jobs(images[:12], pool, JobKind.CONVERSATION)
    res = generate_pairs(jobs, FailingEveryNthClient(MockTeacherClient(), 3), retries=2)
    assert not res.failed and res.counts()["jobs"] == 12


def test_always_failing_client_recorded(pool, images):
    class Down:
        identity = "down"

        def complete(self, system, messages):
            raise TeacherError("unreachable")

    res = generate_pairs(make_jobs(images[:3], pool, JobKind.DETAIL), Down(), retries=2)
    assert [f.attempts for f in res.failed] == [3, 3, 3]
    assert "unreachable" in res.failed[0].error


def test_workers_do_not_change_output(pool, images):
    jobs = make_jobs(images, pool, JobKind.REASONING, Rewrite.ADDING_CONSTRAINTS, seed=2)
    one = generate_pairs(jobs, MockTeacherClient(), workers=1)
    four = generate_pairs(jobs, MockTeacherClient(), workers=4)
    assert [p.to_dict() for p in one.passed] == [p.to_dict() for p in four.passed]
    assert list(one.job_status.items()) == list(four.job_status.items())


def test_mock_is_pure(pool, images):
    system, msgs = build_prompt(make_jobs(images[:1], pool, JobKind.CONVERSATION)[0])
    assert MockTeacherClient().complete(system, msgs) == MockTeacherClient().complete(system, list(msgs))


def test_chinese_generation_passes_language_rule(pool, images):
    jobs = make_jobs(images[:5], pool, JobKind.DETAIL, target_language="zh")
    res = generate_pairs(jobs, MockTeacherClient())
    assert len(res.passed) == 5 and all(p.language == "zh" for p in res.passed)


# -- translation -----------------------------------------------------------------------------

def test_translation_chains_provenance(pool, images):
    src = generate_pairs(make_jobs(images[:1], pool, JobKind.DETAIL), MockTeacherClient()).passed[0]
    out = translate_pair(src, MockTeacherClient())
    assert len(out.passed) == 1
    chain = out.passed[0].provenance.chain()
    assert [p.kind for p in chain] == [JobKind.DETAIL, JobKind.TRANSLATION]
    assert chain[0] == src.provenance and out.passed[0].language == "zh"


def test_echo_translation_rejected_by_r2(pool, images):
    src = generate_pairs(make_jobs(images[:1], pool, JobKind.DETAIL), MockTeacherClient()).passed[0]
    out = translate_pair(src, EchoTranslator())
    assert not out.passed and out.rejected[0].failed_rules == ("R2",)


def test_translate_batch_accounting(pool, images):
    src = generate_pairs(make_jobs(images[:10], pool, JobKind.CONVERSATION), MockTeacherClient()).passed
    out = translate_pairs(src, FailingEveryNthClient(MockTeacherClient(), 4), retries=0)
    c = out.counts()
    assert c["jobs"] == len(src) == c["jobs_passed"] + c["jobs_rejected"] + c["jobs_failed"]


def test_translation_refuses_failed_source():
    from zvforge.datagen import Verdict
    with pytest.raises(ValueError):
        translate_pair(pair().with_verdict(Verdict(False, ("R1",))), MockTeacherClient())


def test_pseudo_cjk_is_cjk():
    from zvforge.datagen.filters import script_share
    assert script_share(pseudo_cjk("A dog rests near a bench."), "zh") == 1.0


# -- filters ---------------------------------------------------------------------------------

def test_refusal_rule():
    v = apply_filters(pair(response="As an AI language model I cannot describe images."))
    assert not v.passed and "R3" in v.failed_rules


def test_chinese_pair_with_95_percent_cjk_passes():
    response = "图" * 95 + "abcde"
    v = apply_filters(pair(instruction="请描述这张图片。", response=response, language="zh"), target_language="zh")
    assert v.passed


@pytest.mark.parametrize("kwargs,rule", [
    ({"instruction": "Hi?"}, "R1"),
    ({"response": ""}, "R1"),
    ({"response": "x" * 4097}, "R1"),
    ({"response": "这是一只狗。"}, "R2"),
    ({"response": "The dog is at (0.6, 0.2, 0.3, 0.4)."}, "R4"),
    ({"instruction": "Same text here", "response": "same text here"}, "R5"),
])
def test_each_rule_fires(kwargs, rule):
    assert rule in apply_filters(pair(**kwargs)).failed_rules


def test_valid_box_in_text_passes():
    assert apply_filters(pair(response="The dog is at (0.1, 0.2, 0.3, 0.4).")).passed


def test_conversation_turn_rule():
    good = (("user", "What is this?"), ("assistant", "A dog."))
    assert apply_filters(pair(kind=JobKind.CONVERSATION, turns=good)).passed
    assert "R6" in apply_filters(pair(kind=JobKind.CONVERSATION, turns=good[::-1])).failed_rules
    assert "R6" in apply_filters(pair(kind=JobKind.CONVERSATION)).failed_rules
    assert apply_filters(pair(kind=JobKind.DETAIL)).passed


text_st = st.lists(st.sampled_from(list("ab 的图?.,()0123456789") + ["As an AI"]), max_size=40).map("".join)


@given(text_st, text_st, st.sampled_from(["en", "zh"]), st.sampled_from(list(JobKind)), st.randoms())
def test_filters_pure_and_order_free(instruction, response, lang, kind, rnd):
    p = pair(instruction, response, lang, kind)
    v1 = apply_filters(p, target_language=lang)
    items = list(DEFAULT_RULES.items())
    rnd.shuffle(items)
    assert apply_filters(p, dict(items), target_language=lang) == v1
    assert apply_filters(p, target_language=lang) == v1
    assert v1.passed == (not v1.failed_rules)


# -- cleaning --------------------------------------------------------------------------------

def test_clean_extremes():
    records = [(f"i{i}", f"c{i}") for i in range(50)]
    assert clean_corpus(records, HashingScorer(), -1.0).retention == 100.0
    assert clean_corpus(records, HashingScorer(), 1.0001).retention == 0.0


def test_crafted_corpus_retention():
    records, scorer = crafted_corpus()
    res = clean_corpus(records, scorer, 0.3)
    assert res.row() == (1000, 850, 85.0)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_retention_monotone(a, b):
    records = [(f"i{i}", f"c{i}") for i in range(200)]
    lo, hi = sorted((a, b))
    assert clean_corpus(records, HashingScorer(), hi).retention <= clean_corpus(records, HashingScorer(), lo).retention


# -- persistence -----------------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path, pool, images):
    res = generate_pairs(make_jobs(images[:6], pool, JobKind.CONVERSATION), MockTeacherClient())
    src = res.passed[0]
    res.extend(translate_pairs([src], MockTeacherClient()))
    path = write_jsonl(tmp_path / "pairs.jsonl", [p.to_dict() for p in res.passed])
    back = read_pairs(path)
    assert back == res.passed
    assert [json.loads(line) for line in path.read_text().splitlines()] == read_jsonl(path)


def test_pair_without_provenance_cannot_persist():
    with pytest.raises(RecordError):
        InstructionResponsePair("abcd", "efg", "en", "i", None).to_dict()
