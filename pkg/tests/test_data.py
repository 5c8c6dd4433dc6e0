import json
import re

import pytest

from dualwaf.data import (
    ATTACK_FAMILIES,
    Dataset,
    DatasetError,
    EmptyDataset,
    IoFailure,
    UnknownFormat,
    dedup,
    generate_synthetic,
    load_dataset,
    parse_label,
    permute_params,
    read_requests,
    split,
    subsample,
)
from dualwaf.request import Parameter, ParsedRequest, decode_value

GOOD = "GET /tienda1/index.jsp?id={i}&nombre=Vino HTTP/1.1\nHost: localhost\n\n"


def raw_file(tmp_path, n_good, bad=(), label="benign"):
    chunks = [f"# label: {label}\n" + GOOD.format(i=i) for i in range(n_good)]
    for pos in bad:
        chunks.insert(pos, "garbage line\n")
    p = tmp_path / "reqs.txt"
    p.write_text("---\n".join(chunks))
    return p


def fake(n0, n1):
    return Dataset([ParsedRequest(f"get /{i}", [], 0) for i in range(n0)]
                   + [ParsedRequest(f"get /m{i}", [], 1) for i in range(n1)])


def test_load_raw(tmp_path):
    ds = load_dataset(raw_file(tmp_path, 5))
    assert len(ds) == 5 and ds.class_counts == {0: 5, 1: 0}
    assert ds.records[2].params[0] == Parameter("id", "2", "query")
    assert ds.provenance == "reqs"


def test_one_malformed_among_ten(tmp_path, caplog):
    ds = load_dataset(raw_file(tmp_path, 9, bad=[4]))
    assert len(ds) == 9 and ds.skipped == 1
    assert "skipping malformed" in caplog.text


def test_strict_raises(tmp_path):
    with pytest.raises(DatasetError):
        read_requests(raw_file(tmp_path, 3, bad=[1]), strict=True)


def test_default_label_and_unlabelled(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text(GOOD.format(i=1) + "---\n" + GOOD.format(i=2))
    assert load_dataset(p, label="malicious").class_counts == {0: 0, 1: 2}
    with pytest.raises(EmptyDataset):
        load_dataset(p)


def test_empty_and_missing(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    with pytest.raises(EmptyDataset):
        load_dataset(p)
    with pytest.raises(IoFailure):
        load_dataset(tmp_path / "nope.txt")


def test_unknown_format(tmp_path):
    p = tmp_path / "x.parquet"
    p.write_text("")
    with pytest.raises(UnknownFormat):
        load_dataset(p)
    with pytest.raises(UnknownFormat):
        load_dataset(p, fmt="xml")


def test_jsonl_fields_and_parsed(tmp_path):
    p = tmp_path / "d.jsonl"
    lines = [
        {"method": "POST", "url": "/Login", "body": "u=a&p=%27+or+1%3D1", "label": 1,
         "headers": {"Content-Type": "application/x-www-form-urlencoded"}},
        {"url": "get /a", "params": [{"key": "k", "value": "v", "source": "query"}], "label": "normal"},
        "not json",
    ]
    p.write_text("\n".join(x if isinstance(x, str) else json.dumps(x) for x in lines))
    ds = load_dataset(p)
    assert ds.skipped == 1
    a, b = ds.records
    assert a.url == "post /login" and a.params[1].value == "' or 1=1" and a.label == 1
    assert b.params == [Parameter("k", "v", "query")] and b.label == 0


def test_jsonl_round_trip(tmp_path):
    ds = generate_synthetic(20, seed=2)
    ds.to_jsonl(tmp_path / "s.jsonl")
    back = load_dataset(tmp_path / "s.jsonl")
    assert [(r.url, r.params, r.label) for r in back] == [(r.url, r.params, r.label) for r in ds]


def test_parse_label():
    assert parse_label("Anomalous") == 1 and parse_label("valid") == 0 and parse_label(True) == 1
    with pytest.raises(DatasetError):
        parse_label(7)
    with pytest.raises(DatasetError):
        parse_label("maybe")


def test_split_100():
    train, test = split(fake(50, 50), seed=0)
    assert len(train) == 70 and len(test) == 30
    assert train.class_counts == {0: 35, 1: 35} and test.class_counts == {0: 15, 1: 15}
    again = split(fake(50, 50), seed=0)
    assert [r.url for r in again[0]] == [r.url for r in train]
    assert [r.url for r in split(fake(50, 50), seed=1)[0]] != [r.url for r in train]


def test_split_full_corpus_counts():
    train, test = split(fake(36_000, 21_065), seed=0)
    assert abs(len(train) - 39_945) <= 1 and abs(len(test) - 17_120) <= 1
    assert train.class_counts[0] == 25_200
    assert abs(train.class_counts[1] - 0.7 * 21_065) <= 1
    assert not {r.url for r in train} & {r.url for r in test}


def test_split_needs_ten():
    with pytest.raises(DatasetError):
        split(fake(5, 4))


def test_subsample_preserves_proportions():
    s = subsample(fake(300, 100), 200, seed=0)
    assert s.class_counts == {0: 150, 1: 50}
    assert subsample(fake(3, 3), 100) is not None


def test_dedup():
    r = ParsedRequest("get /a", [Parameter("x", "1"), Parameter("y", "2")], 0)
    same = ParsedRequest("get /a", [Parameter("y", "2"), Parameter("x", "1")], 0)
    other = ParsedRequest("get /a", [Parameter("x", "1"), Parameter("y", "2")], 1)
    assert len(dedup(Dataset([r, same, other]))) == 2


def test_synthetic_contract():
    ds = generate_synthetic(100, seed=0)
    again = generate_synthetic(100, seed=0)
    assert [r.to_dict() for r in ds] == [r.to_dict() for r in again]
    assert ds.class_counts == {0: 50, 1: 50}
    for r in ds:
        if r.label == 1:
            assert r.attack_param is not None and 0 <= r.attack_param < len(r.params)
        else:
            assert r.attack_param is None


def test_synthetic_injected_value_is_in_ground_truth_slot():
    ds = generate_synthetic(400, seed=3)
    # longest literal stretch of each template, outside the {w}/{n} placeholders
    payloads = [decode_value(max(re.split(r"\{[wn]\}", t), key=len))
                for fam in ATTACK_FAMILIES.values() for t in fam]
    for r in ds:
        if r.label == 1:
            value = decode_value(r.params[r.attack_param].value)
            assert any(p and p in value for p in payloads), value


def test_synthetic_families_present():
    values = " ".join(p.value for r in generate_synthetic(400, seed=0) for p in r.params)
    assert "alert(" in values
    assert "or 'a='a'" in values


def test_synthetic_url_attacks():
    ds = generate_synthetic(200, seed=0, url_attack_rate=1.0)
    assert all(r.attack_param is None for r in ds)
    assert sum("passwd" in r.url or "script" in r.url or "win.ini" in r.url or ".bak" in r.url
               or "%27%20or%201=1" in r.url for r in ds if r.label == 1) == 100


def test_permute_params_follows_ground_truth():
    ds = generate_synthetic(60, seed=1)
    perm = permute_params(ds.records, seed=5)
    for a, b in zip(ds, perm):
        key = lambda p: (p.key, p.value, p.source)
        assert sorted(a.params, key=key) == sorted(b.params, key=key)
        if a.attack_param is not None:
            assert b.params[b.attack_param] == a.params[a.attack_param]
