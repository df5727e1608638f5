import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from petnas.data import (
    Dataset,
    HashTokenizer,
    TaskSpec,
    generate_task,
    load_jsonl,
    load_task,
    write_jsonl,
)
from petnas.errors import ConfigError, InputError, ParseError
from petnas.model import BOS_ID

V, L = 64, 16


def test_presence_split_sizes_and_disjoint():
    s = generate_task(TaskSpec("presence", 512, 128, seed=0), V, L)
    assert len(s.train) == 512 and len(s.validation) == 128
    train = {e.tokens for e in s.train.examples}
    val = {e.tokens for e in s.validation.examples}
    assert not train & val


@pytest.mark.parametrize("kind", ["presence", "order", "majority"])
def test_generators_are_deterministic_and_consistent(kind):
    a = generate_task(TaskSpec(kind, 100, 20, seed=5), V, L)
    b = generate_task(TaskSpec(kind, 100, 20, seed=5), V, L)
    assert a.train.examples == b.train.examples and a.validation.examples == b.validation.examples
    for e in a.train.examples:
        assert e.tokens[0] == 1 and len(e.tokens) <= L
        assert all(2 <= t < V for t in e.tokens[1:])
        body = list(e.tokens[1:])
        if kind == "presence":
            assert e.label == int(2 in body)
        elif kind == "order":
            assert body.count(2) == body.count(3) == 1
            assert e.label == int(body.index(2) < body.index(3))
        else:
            assert e.label == int(body.count(2) > body.count(3))
    labels = a.train.labels
    assert 0.25 < labels.mean() < 0.75


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["presence", "order", "majority"]))
def test_disjoint_for_any_seed(seed, kind):
    s = generate_task(TaskSpec(kind, 60, 30, seed=seed), V, L)
    assert not {e.tokens for e in s.train.examples} & {e.tokens for e in s.validation.examples}


def test_invalid_sizes_rejected():
    with pytest.raises(ConfigError, match="task.train_size"):
        generate_task(TaskSpec("presence", 0, 10), V, L)
    with pytest.raises(ConfigError, match="task.kind"):
        generate_task(TaskSpec("parity", 10, 10), V, L)


def test_tokenizer_is_stable():
    tok = HashTokenizer(V, L)
    ids = tok.encode("a b a")
    assert len(ids) == 3 and ids[0] == ids[2] != ids[1]
    # pinned: blake2b-based buckets must not depend on the interpreter's hash seed
    assert ids == [tok.token_id("a"), tok.token_id("b"), tok.token_id("a")]
    assert tok.token_id("a") == 2 + int.from_bytes(
        __import__("hashlib").blake2b(b"a", digest_size=8).digest(), "little") % (V - 2)


def test_jsonl_loading_and_truncation(tmp_path):
    path = tmp_path / "d.jsonl"
    long_text = " ".join(f"w{i}" for i in range(40))
    path.write_text(json.dumps({"text": "a b a", "label": 1}) + "\n"
                    + json.dumps({"text": long_text, "label": 0}) + "\n")
    tok = HashTokenizer(V, L)
    ex = load_jsonl(path, tok, 2)
    assert list(ex[0].tokens) == [BOS_ID] + tok.encode("a b a") and ex[0].label == 1
    assert list(ex[1].tokens) == [BOS_ID] + tok.encode(" ".join(f"w{i}" for i in range(L - 1)))


def test_jsonl_errors_cite_line(tmp_path):
    lines = [json.dumps({"text": "x", "label": 0})] * 6 + ["{not json"]
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="line 7") as err:
        load_jsonl(path, HashTokenizer(V, L), 2)
    assert err.value.line == 7
    path.write_text(json.dumps({"text": "x", "label": 5}) + "\n")
    with pytest.raises(InputError, match="label"):
        load_jsonl(path, HashTokenizer(V, L), 2)


def test_export_roundtrip(tmp_path):
    s = generate_task(TaskSpec("order", 20, 10, seed=2), V, L)
    write_jsonl(s.train.examples, tmp_path / "train.jsonl")
    write_jsonl(s.validation.examples, tmp_path / "val.jsonl")
    spec = TaskSpec(path=str(tmp_path / "train.jsonl"), val_path=str(tmp_path / "val.jsonl"))
    loaded = load_task(spec, V, L, 2)
    assert loaded.train.examples == s.train.examples
    np.testing.assert_array_equal(loaded.validation.tokens, s.validation.tokens)


def test_dataset_is_read_only():
    s = generate_task(TaskSpec("presence", 10, 5, seed=0), V, L)
    with pytest.raises(ValueError):
        s.train.tokens[0, 0] = 3
    assert isinstance(s.train, Dataset)
