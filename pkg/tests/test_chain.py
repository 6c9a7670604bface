"""Chain model: validation, append semantics, serialization round-trip."""

import json

import pytest
from hypothesis import given, strategies as st

from finpyramid.chain import (
    ComplexityDegree,
    PyramidLevel,
    append_sample,
    chain_from_dict,
    chain_to_dict,
    validate_chain,
)
from finpyramid.errors import ImageMismatch, MonotonicityViolation

from conftest import make_chain, make_sample


def test_level_label_bijection():
    assert [(int(l), l.label) for l in PyramidLevel] == [
        (1, "PP"), (2, "DE"), (3, "CA"), (4, "PR"), (5, "LR"), (6, "DS"),
    ]


@pytest.mark.parametrize("value", [0, 7, -1])
def test_level_out_of_range_rejected(value):
    with pytest.raises(ValueError):
        PyramidLevel(value)


@pytest.mark.parametrize("value", [0, 6])
def test_complexity_out_of_range_rejected(value):
    with pytest.raises(ValueError):
        ComplexityDegree(value)


def test_sample_field_validation():
    with pytest.raises(ValueError):
        make_sample(question="")
    with pytest.raises(ValueError):
        make_sample(answer="")
    with pytest.raises(ValueError):
        make_sample(reward=1.2)
    with pytest.raises(ValueError):
        make_sample(reward=-0.1)


def test_validate_monotone_sequence_has_no_ordering_violations():
    # levels [1,2,2,5,6] with complexities [2,3] inside the repeated level:
    # the ordering rules hold by construction (the n >= l length rule is a
    # separate violation, reported independently).
    chain = make_chain([(1, 1), (2, 2), (2, 3), (5, 1), (6, 1)])
    report = validate_chain(chain)
    assert not report.rules() & {"level_monotonicity", "complexity_monotonicity"}
    assert not any(v.rule == "image_mismatch" for v in report.violations)


def test_validate_level_decrease():
    chain = make_chain([(1, 1), (3, 1), (2, 1)])
    report = validate_chain(chain)
    assert "level_monotonicity" in report.rules()
    violation = next(v for v in report.violations if v.rule == "level_monotonicity")
    assert violation.index == 2


def test_validate_length_below_terminal_level():
    chain = make_chain([(1, 1), (2, 1), (4, 1), (6, 1)])
    report = validate_chain(chain)
    assert "length_below_terminal_level" in report.rules()


def test_validate_complexity_decrease_within_level():
    chain = make_chain([(1, 1), (3, 4), (3, 2)])
    report = validate_chain(chain)
    assert "complexity_monotonicity" in report.rules()


def test_validate_ok_chain():
    chain = make_chain([(1, 1), (2, 1), (3, 2)])
    assert validate_chain(chain).ok


def test_validate_image_mismatch_reported():
    from dataclasses import replace

    chain = make_chain([(1, 1), (2, 1)])
    bad_first = replace(chain.samples[0], image="other.png")
    chain = replace(chain, samples=(bad_first,) + chain.samples[1:])
    report = validate_chain(chain)
    assert "image_mismatch" in report.rules()


def test_append_equal_level_equal_complexity_accepted():
    chain = make_chain([(1, 1), (2, 3)])
    sample = make_sample(sample_id="new", level=2, complexity=3)
    grown = append_sample(chain, sample)
    assert len(grown) == 3
    assert len(chain) == 2  # input unmodified


def test_append_level_decrease_rejected():
    chain = make_chain([(1, 1), (4, 1)])
    with pytest.raises(MonotonicityViolation):
        append_sample(chain, make_sample(sample_id="new", level=3, complexity=5))


def test_append_complexity_may_reset_on_level_increase():
    chain = make_chain([(1, 1), (5, 2)])
    grown = append_sample(chain, make_sample(sample_id="new", level=6, complexity=1))
    assert int(grown.terminal.level) == 6


def test_append_complexity_decrease_within_level_rejected():
    chain = make_chain([(1, 1), (3, 4)])
    with pytest.raises(MonotonicityViolation):
        append_sample(chain, make_sample(sample_id="new", level=3, complexity=2))


def test_append_image_mismatch():
    chain = make_chain([(1, 1)])
    with pytest.raises(ImageMismatch):
        append_sample(chain, make_sample(sample_id="new", image="other.png"))


def test_round_trip_preserves_all_fields():
    chain = make_chain([(1, 1), (2, 2), (3, 3)], rewards=[1.0, 0.5, 0.25],
                       terminal_reward=0.25)
    data = json.loads(json.dumps(chain_to_dict(chain)))
    assert chain_from_dict(data) == chain


def test_round_trip_preserves_unknown_fields():
    chain = make_chain([(1, 1)])
    data = chain_to_dict(chain)
    data["custom_tag"] = {"nested": [1, 2]}
    restored = chain_from_dict(data)
    assert restored.extra == {"custom_tag": {"nested": [1, 2]}}
    assert chain_to_dict(restored)["custom_tag"] == {"nested": [1, 2]}


# --- property: accepted appends always yield a chain the validator accepts ---

@st.composite
def sample_specs(draw):
    n = draw(st.integers(min_value=1, max_value=12))
    return [
        (draw(st.integers(min_value=1, max_value=6)),
         draw(st.integers(min_value=1, max_value=5)))
        for _ in range(n)
    ]


@given(sample_specs())
def test_accepted_appends_always_validate(specs):
    chain = make_chain([(1, 1)])
    for i, (level, complexity) in enumerate(specs):
        sample = make_sample(sample_id=f"p{i}", level=level, complexity=complexity)
        tail = chain.terminal
        expect_reject = level < int(tail.level) or (
            level == int(tail.level) and complexity < int(tail.complexity)
        )
        if expect_reject:
            with pytest.raises(MonotonicityViolation):
                append_sample(chain, sample)
        else:
            chain = append_sample(chain, sample)
            report = validate_chain(chain)
            assert not report.rules() & {
                "level_monotonicity", "complexity_monotonicity", "image_mismatch",
            }
