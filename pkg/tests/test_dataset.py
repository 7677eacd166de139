import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from steersweep import BehaviorDataset, ContrastivePair, load_dataset, render_eval_prompt, render_pair
from steersweep.errors import DatasetError, TokenizationError

Q = "Pick one.\n\nChoices:\n(A) yes\n(B) no"


def write(tmp_path, entries):
    path = tmp_path / "pairs.json"
    path.write_text(json.dumps(entries))
    return path


def entry(question=Q, m="(A)", n="(B)"):
    return {"question": question, "answer_matching_behavior": m, "answer_not_matching_behavior": n}


def test_bundled_dataset_loads(reassurance):
    assert reassurance.behavior_name == "reassurance"
    assert len(reassurance) == 40
    letters = [p.matching_letter for p in reassurance.pairs]
    assert 0 < letters.count("A") < 40


def test_all_errors_reported_with_index(tmp_path):
    path = write(tmp_path, [entry(), {"question": Q}, entry(m="(C)"), "oops", entry(question="no markers")])
    with pytest.raises(DatasetError) as exc:
        load_dataset(path)
    msg = str(exc.value)
    assert "entry 1: missing field(s) answer_matching_behavior, answer_not_matching_behavior" in msg
    assert "entry 2: answer_matching_behavior must be one of" in msg
    assert "entry 3: expected an object" in msg
    assert "entry 4: question is missing the (A) choice marker" in msg
    assert "entry 0" not in msg


@pytest.mark.parametrize("content, match", [("[]", "empty dataset"), ("{}", "JSON array"), ("[1,", "JSON parse error")])
def test_bad_files(tmp_path, content, match):
    path = tmp_path / "d.json"
    path.write_text(content)
    with pytest.raises(DatasetError, match=match):
        load_dataset(path)


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "nope.json")


def test_identical_answers_rejected():
    with pytest.raises(DatasetError, match="both answers"):
        ContrastivePair(Q, "(A)", "(A)")


def test_empty_dataset_object():
    with pytest.raises(DatasetError, match="empty dataset"):
        BehaviorDataset("x", ())


def test_render_pair_puts_matching_first():
    pos, neg = render_pair(ContrastivePair(Q, "(B)", "(A)"))
    assert pos == Q + "\n\nI choose (B)"
    assert neg == Q + "\n\nI choose (A)"


def test_eval_prompt_tokens(tokenizer):
    ev = render_eval_prompt(ContrastivePair(Q, "(A)", "(B)"), tokenizer)
    assert ev.text.endswith("I choose (")
    assert list(ev.tokens) == tokenizer.encode(Q + "\n\nI choose (")
    assert (ev.token_matching, ev.token_not_matching) == (32, 33)


def test_eval_prompt_follows_matching_label(tokenizer):
    ev = render_eval_prompt(ContrastivePair(Q, "(B)", "(A)"), tokenizer)
    assert (ev.token_matching, ev.token_not_matching) == (33, 32)


class MergingTokenizer:
    """Fake tokenizer where a trailing choice letter merges into the previous token."""

    def encode(self, text):
        ids = [ord(c) for c in text]
        if text.endswith("(A") or text.endswith("(B"):
            return ids[:-2] + [1000 + ids[-1]]
        return ids


class SharedFirstTokenTokenizer:
    def encode(self, text):
        ids = [ord(c) for c in text]
        if text[-1] in "AB" and text[-2] == "(":
            return ids[:-1] + [7, ids[-1]]
        return ids


def test_merging_continuation_is_an_error():
    with pytest.raises(TokenizationError, match="clean extension"):
        render_eval_prompt(ContrastivePair(Q, "(A)", "(B)"), MergingTokenizer())


def test_shared_first_token_is_an_error():
    with pytest.raises(TokenizationError, match="share the first token"):
        render_eval_prompt(ContrastivePair(Q, "(A)", "(B)"), SharedFirstTokenTokenizer())


def test_split_is_seeded_and_disjoint(reassurance):
    a = reassurance.split(seed=42)
    assert a == reassurance.split(seed=42)
    assert a != reassurance.split(seed=43)
    assert len(a.eval) == 4 and len(a.build) == 36
    assert sorted(a.build + a.eval) == list(range(40))


@given(n=st.integers(2, 60), frac=st.floats(0.01, 0.99), seed=st.integers(0, 2**32 - 1))
def test_split_partition(n, frac, seed):
    ds = BehaviorDataset("x", tuple(ContrastivePair(Q, "(A)", "(B)") for _ in range(n)))
    s = ds.split(seed=seed, eval_fraction=frac)
    assert len(s.build) >= 1 and len(s.eval) >= 1
    assert sorted(s.build + s.eval) == list(range(n))


def test_single_pair_cannot_split():
    with pytest.raises(DatasetError, match="at least 2"):
        BehaviorDataset("x", (ContrastivePair(Q, "(A)", "(B)"),)).split()


def test_fingerprint_tracks_content():
    p = ContrastivePair(Q, "(A)", "(B)")
    assert BehaviorDataset("x", (p,)).fingerprint == BehaviorDataset("x", [p]).fingerprint
    assert BehaviorDataset("x", (p,)).fingerprint != BehaviorDataset("x", (p.swapped(),)).fingerprint
