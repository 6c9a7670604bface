"""Eval harness: scripted evaluation runs, aggregation, trace-back, reports."""

import json

import pytest

from finpyramid.chain import PyramidLevel
from finpyramid.dataset import DatasetItem
from finpyramid.errors import EmptyTraceSet
from finpyramid.evaluate import (
    EvalResult,
    aggregate,
    build_model_table,
    dataset_stats,
    error_proportions,
    read_results,
    render_report,
    run_eval,
    trace_back,
)
from finpyramid.verify import VerifierConfig

from conftest import make_chain, scripted_agent

EXACT = VerifierConfig(mode="exact")


def items_with_refs(pairs):
    """pairs: list of (sample_id, level, reference answer)."""
    return [
        DatasetItem(sample_id=sid, chain_id="c", task_id="t", image="img.png",
                    theme="stocks", image_type="line_chart", level=level,
                    complexity=1, question=f"{sid}?", answer=ref)
        for sid, level, ref in pairs
    ]


def model_answering(mapping, model_name="m"):
    rows = [{"question": q, "answer": a} for q, a in mapping.items()]
    return scripted_agent(rows, model_name=model_name)


def result(model="m", sample_id="s", level=1, complexity=1, theme="stocks",
           image_type="line_chart", correct=True, error_flag=False):
    return EvalResult(model_name=model, sample_id=sample_id,
                      level=PyramidLevel(level), complexity=complexity,
                      theme=theme, image_type=image_type, predicted="x",
                      correct=correct, raw_reply="", error_flag=error_flag)


# --- run_eval -----------------------------------------------------------------

def test_run_eval_all_correct_when_model_echoes_references():
    items = items_with_refs([("s1", 1, "alpha"), ("s2", 2, "beta")])
    agent = model_answering({"s1?": "\\boxed{alpha}", "s2?": "\\boxed{beta}"})
    results = run_eval("m", agent, items, EXACT)
    assert [r.correct for r in results] == [True, True]
    assert results[0].predicted == "alpha"


def test_run_eval_unboxed_reply_is_incorrect():
    # evaluation protocol is strict: no box, no credit
    items = items_with_refs([("s1", 1, "alpha")])
    agent = model_answering({"s1?": "alpha"})
    results = run_eval("m", agent, items, EXACT)
    assert results[0].correct is False
    assert results[0].predicted == ""
    assert results[0].error_flag is False


def test_run_eval_transport_error_flagged_not_dropped():
    items = items_with_refs([("s1", 1, "alpha"), ("s2", 2, "beta")])
    agent = model_answering({"s2?": "\\boxed{beta}"})  # s1 missing -> transport error
    results = run_eval("m", agent, items, EXACT)
    assert len(results) == 2
    assert results[0].error_flag is True and results[0].correct is False
    assert results[1].correct is True


def test_run_eval_resume_skips_completed(tmp_path):
    items = items_with_refs([("s1", 1, "alpha"), ("s2", 2, "beta")])
    path = tmp_path / "results.jsonl"
    agent = model_answering({"s1?": "\\boxed{alpha}", "s2?": "\\boxed{beta}"})
    first = run_eval("m", agent, items, EXACT, results_path=path)
    assert len(read_results(path)) == 2
    # rerun against a model fixture that would now FAIL s1: the stored verdict
    # must be reused, proving completed samples are not re-queried
    flipped = model_answering({"s1?": "\\boxed{wrong}", "s2?": "\\boxed{beta}"})
    second = run_eval("m", flipped, items, EXACT, results_path=path)
    assert second == first
    assert len(read_results(path)) == 2  # nothing appended


def test_run_eval_boxed_reference_compared_by_core():
    items = items_with_refs([("s1", 1, "reasoning \\boxed{42}")])
    agent = model_answering({"s1?": "\\boxed{42}"})
    results = run_eval("m", agent, items, EXACT)
    assert results[0].correct is True


# --- aggregate -------------------------------------------------------------------

def test_aggregate_overall_fixture_301():
    results = [result(sample_id=f"s{i}", correct=i < 225) for i in range(301)]
    rows = aggregate(results, ("model",))
    assert rows == [{"model": "m", "total": 301, "correct": 225, "accuracy": 74.75}]


def test_aggregate_level_fixture_76():
    results = [result(sample_id=f"s{i}", level=1, correct=i < 66) for i in range(76)]
    rows = aggregate(results, ("model", "level"))
    assert rows[0]["accuracy"] == 86.84
    assert rows[0]["level"] == "PP"


def test_aggregate_empty():
    assert aggregate([], ("model",)) == []


def test_aggregate_permutation_invariant():
    import random as _random

    results = [result(sample_id=f"s{i}", level=(i % 6) + 1, correct=i % 3 == 0)
               for i in range(60)]
    rows = aggregate(results, ("level",))
    shuffled = list(results)
    _random.Random(4).shuffle(shuffled)
    assert aggregate(shuffled, ("level",)) == rows


def test_aggregate_group_counts_partition_total():
    results = [result(sample_id=f"s{i}", level=(i % 4) + 1, theme=f"th{i % 3}")
               for i in range(57)]
    for keys in (("level",), ("theme",), ("level", "theme")):
        rows = aggregate(results, keys)
        assert sum(r["total"] for r in rows) == 57


# --- render_report -----------------------------------------------------------------

def table_one_shaped_results():
    results = []
    # GLM-like fixture: 301 results, 225 correct overall
    for i in range(301):
        results.append(result(model="GLM-4.5V", sample_id=f"g{i}",
                              level=(i % 6) + 1, complexity=(i % 5) + 1,
                              correct=i < 225))
    return results


def test_render_markdown_header_and_overall():
    table = build_model_table(table_one_shaped_results())
    doc = render_report(table, "markdown")
    header = doc.splitlines()[0]
    assert "Overall | PP | DE | CA | PR | LR | DS" in header
    assert "| 74.75 |" in doc.splitlines()[2]


def test_csv_and_markdown_numeric_content_identical():
    table = build_model_table(table_one_shaped_results())
    csv_doc = render_report(table, "csv")
    md_doc = render_report(table, "markdown")
    csv_cells = csv_doc.splitlines()[1].split(",")
    md_cells = [c.strip() for c in md_doc.splitlines()[2].split("|")[1:-1]]
    assert csv_cells == md_cells


def test_render_empty_table_is_header_only():
    assert render_report([], "csv").splitlines() == [
        "Model,Overall,PP,DE,CA,PR,LR,DS,1,2,3,4,5"
    ]


def test_render_unknown_format():
    with pytest.raises(ValueError):
        render_report([], "html")


def test_empty_groups_render_blank():
    results = [result(sample_id=f"s{i}", level=1) for i in range(4)]
    table = build_model_table(results)
    row = render_report(table, "csv").splitlines()[1].split(",")
    assert row[2] == "100.00"  # PP
    assert row[3] == ""  # DE has no samples


# --- trace_back ----------------------------------------------------------------------

def chain_with_refs():
    return make_chain([(1, 1), (3, 1), (6, 1), (6, 2), (6, 3), (6, 4)])


def test_trace_back_first_failure_at_planted_level():
    chain = make_chain([(1, 1), (2, 1), (3, 1)])
    # wrong only on the level-3 sample
    agent = model_answering({
        "question 0?": "\\boxed{answer 0}",
        "question 1?": "\\boxed{answer 1}",
        "question 2?": "\\boxed{nope}",
    })
    trace = trace_back(chain, "m", agent, EXACT)
    assert trace.verdicts == (True, True, False)
    assert trace.first_failure_level is PyramidLevel.CA


def test_trace_back_all_correct_has_no_failure():
    chain = make_chain([(1, 1), (2, 1), (3, 1)])
    agent = model_answering({f"question {i}?": f"\\boxed{{answer {i}}}"
                             for i in range(3)})
    trace = trace_back(chain, "m", agent, EXACT)
    assert trace.first_failure_level is None
    assert len(trace.verdicts) == len(chain)


def test_trace_back_terminal_failure():
    chain = make_chain([(1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (6, 1)])
    mapping = {f"question {i}?": f"\\boxed{{answer {i}}}" for i in range(5)}
    mapping["question 5?"] = "\\boxed{bad}"
    trace = trace_back(chain, "m", model_answering(mapping), EXACT)
    assert trace.first_failure_level is PyramidLevel.DS


def test_trace_back_transport_error_counts_incorrect_with_flag():
    chain = make_chain([(1, 1), (2, 1)])
    agent = model_answering({"question 0?": "\\boxed{answer 0}"})
    trace = trace_back(chain, "m", agent, EXACT)
    assert trace.verdicts == (True, False)
    assert trace.error_flags == (False, True)
    assert trace.first_failure_level is PyramidLevel.DE


# --- error_proportions ------------------------------------------------------------------

def planted_trace(level, chain_id="c"):
    from finpyramid.evaluate import TraceReport

    return TraceReport(chain_id=chain_id, model_name="m", verdicts=(False,),
                       error_flags=(False,), first_failure_level=PyramidLevel(level))


def test_error_proportions_counts():
    traces = [planted_trace(3, f"a{i}") for i in range(4)]
    traces += [planted_trace(6, f"b{i}") for i in range(6)]
    dist = error_proportions(traces)
    assert dist == {PyramidLevel.CA: 0.4, PyramidLevel.DS: 0.6}
    assert abs(sum(dist.values()) - 1.0) <= 1e-12


def test_error_proportions_single_trace():
    dist = error_proportions([planted_trace(2)])
    assert dist == {PyramidLevel.DE: 1.0}


def test_error_proportions_empty_raises():
    with pytest.raises(EmptyTraceSet):
        error_proportions([])


def test_error_proportions_rejects_unfailed_trace():
    from finpyramid.evaluate import TraceReport

    unfailed = TraceReport(chain_id="c", model_name="m", verdicts=(True,),
                           error_flags=(False,), first_failure_level=None)
    with pytest.raises(ValueError):
        error_proportions([unfailed])


# --- dataset_stats --------------------------------------------------------------------

def test_dataset_stats_mean_length():
    ladder = [(1, 1), (2, 1), (3, 1), (4, 1), (5, 1), (6, 1)]
    chains = [
        make_chain(ladder[:n], chain_id=f"c{i}", task_id=f"t{i}")
        for i, n in enumerate((2, 4, 6))
    ]
    stats = dataset_stats(chains)
    assert stats["chain_count"] == 3
    assert stats["mean_chain_length"] == 4.0


def test_dataset_stats_terminal_level_grouping():
    chains = [
        make_chain([(1, 1), (2, 1)], chain_id="c1", task_id="t1"),
        make_chain([(1, 1), (2, 1), (2, 2)], chain_id="c2", task_id="t2"),
        make_chain([(1, 1), (2, 1), (3, 1)], chain_id="c3", task_id="t3"),
    ]
    stats = dataset_stats(chains)
    assert stats["by_terminal_level"]["DE"]["count"] == 2
    assert stats["by_terminal_level"]["DE"]["mean_length"] == 2.5
    assert stats["by_terminal_level"]["CA"]["median_length"] == 3
    assert stats["samples_by_theme"]["stocks"] == 8


def test_dataset_stats_empty():
    stats = dataset_stats([])
    assert stats["chain_count"] == 0
    assert stats["total_samples"] == 0
    assert stats["mean_chain_length"] == 0.0


def test_dataset_stats_corpus_scale_count_echo():
    # corpus-shaped fixture: tens of thousands of single-sample chains
    chains = [
        make_chain([(1, 1)], chain_id=f"c{i}", task_id=f"t{i}")
        for i in range(62_660)
    ]
    assert dataset_stats(chains)["chain_count"] == 62_660
