import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from bridged.prompts import (PromptError, PromptTemplate, default_bank, get_template, parse_bank, render_style_prompt,
                             render_template, sample_prompt)


def test_bank_shape():
    bank = default_bank()
    assert len(bank) == 27
    assert [t.id for t in bank] == list(range(1, 28))
    assert all(t.pattern.count("{C}") == 1 for t in bank)


def test_render_examples():
    assert render_template(1, "cat") == "a photo of a cat."
    assert render_template(get_template(14), "Abyssinian") == "a good photo of the Abyssinian."
    with pytest.raises(PromptError):
        render_template(1, "")
    with pytest.raises(PromptError):
        get_template(28)


def test_style_prompt_examples():
    assert render_style_prompt("braided", "S*") == "A braided photo in the style of S*"
    assert render_style_prompt("707-320", "<aircraft-style>") == "A 707-320 photo in the style of <aircraft-style>"
    with pytest.raises(PromptError):
        render_style_prompt("", "S*")
    with pytest.raises(PromptError):
        render_style_prompt("cat", "")


def test_sample_prompt_deterministic_and_verbatim():
    assert sample_prompt("cat", 42) == sample_prompt("cat", 42)
    name = "Bombay (cat), \"black\"!"
    prompt, tid = sample_prompt(name, 3)
    assert prompt == render_template(tid, name)
    assert name in prompt


def test_sample_prompt_uniform_chi_square():
    ids = [sample_prompt("cat", s)[1] for s in range(27_000)]
    counts = np.bincount(ids, minlength=28)[1:]
    assert stats.chisquare(counts).pvalue > 0.01


def test_parse_bank_errors():
    with pytest.raises(PromptError):
        parse_bank("1\ta {C} and {C}\n")
    with pytest.raises(PromptError):
        parse_bank("1\tno placeholder\n")
    with pytest.raises(PromptError):
        parse_bank("1\ta {C}\n3\tb {C}\n")
    assert parse_bank("2\tb {C}\n1\ta {C}\n")[0] == PromptTemplate(1, "a {C}")


@given(a=st.text(min_size=1, max_size=20), b=st.text(min_size=1, max_size=20), tid=st.integers(1, 27))
def test_render_injective(a, b, tid):
    if a != b:
        assert render_template(tid, a) != render_template(tid, b)
