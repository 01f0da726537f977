import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structvit import ums
from structvit.ums import BOS, EOS, FindingState, SchemaConfig

CXR = SchemaConfig(("Lung Opacity", "Pneumonia", "Pleural Effusion", "Cardiomegaly"))
EXAMPLE_LABELS = {"Lung Opacity": 1.0, "Pneumonia": -1.0, "Pleural Effusion": 1.0, "Cardiomegaly": None}


def example_record():
    return ums.build_record(EXAMPLE_LABELS, CXR)


# --- build_record -----------------------------------------------------------


def test_build_record_listing_example():
    r = example_record()
    assert list(r.findings.values()) == [FindingState.PRESENT, FindingState.UNCERTAIN, FindingState.PRESENT, FindingState.NULL]
    assert list(r.answerability.values()) == [True, True, True, False]


@pytest.mark.parametrize("blank", [None, "", "  ", float("nan")])
def test_build_record_all_missing(blank):
    r = ums.build_record(dict.fromkeys(CXR.finding_names, blank), CXR)
    assert all(s is FindingState.NULL for s in r.findings.values())
    assert not any(r.answerability.values())


def test_build_record_all_negative():
    r = ums.build_record(dict.fromkeys(CXR.finding_names, 0.0), CXR)
    assert all(s is FindingState.ABSENT for s in r.findings.values())
    assert all(r.answerability.values())


def test_build_record_accepts_csv_strings():
    r = ums.build_record({"Lung Opacity": "1.0", "Pneumonia": "-1", "Pleural Effusion": "0"}, CXR)
    assert r.findings["Pneumonia"] is FindingState.UNCERTAIN
    assert r.findings["Cardiomegaly"] is FindingState.NULL


@pytest.mark.parametrize("bad", [2.0, 0.5, "yes"])
def test_build_record_rejects_unknown_symbol_naming_the_finding(bad):
    with pytest.raises(ums.LabelFormatError, match="Pneumonia"):
        ums.build_record({"Pneumonia": bad}, CXR)


def test_build_record_rejects_unknown_finding():
    with pytest.raises(ums.SchemaError):
        ums.build_record({"Fracture": 1.0}, CXR)


def test_schema_invariants():
    with pytest.raises(ums.SchemaError):
        SchemaConfig(("A", "A"))
    with pytest.raises(ums.SchemaError):
        SchemaConfig(("A", ""))
    with pytest.raises(ums.SchemaError):
        SchemaConfig(("A", "B"), {"A": 0.1})
    with pytest.raises(ums.SchemaError):
        SchemaConfig(("A",), {"A": 1.5})
    s = SchemaConfig(("A", "B"), {"A": 0.1, "B": 0.9})
    assert SchemaConfig.from_json(s.to_json()) == s


# --- serialization ----------------------------------------------------------


def test_serialize_listing_example():
    text = ums.serialize_canonical(example_record())
    assert '"Pneumonia":{"state":"uncertain"}' in text
    assert '"Cardiomegaly":{"state":null}' in text
    assert text.endswith('"Cardiomegaly":false}}')
    assert text.startswith('{"findings":{"Lung Opacity":{"state":"present"}')
    assert '"answerability":{"Lung Opacity":true,"Pneumonia":true,"Pleural Effusion":true,"Cardiomegaly":false}' in text
    assert " " not in text.replace("Lung Opacity", "").replace("Pleural Effusion", "")


def test_serialize_is_deterministic_and_valid_json():
    r = example_record()
    a, b = ums.serialize_canonical(r), ums.serialize_canonical(example_record())
    assert a == b
    doc = json.loads(a)
    assert list(doc) == ["findings", "answerability"]
    assert list(doc["findings"]) == list(CXR.finding_names)


def test_serialize_subset():
    text = ums.serialize_canonical(example_record(), ["Pneumonia"])
    doc = json.loads(text)
    assert list(doc["findings"]) == ["Pneumonia"]
    assert list(doc["answerability"]) == ["Pneumonia"]


def test_serialize_subset_keeps_schema_order():
    text = ums.serialize_canonical(example_record(), ["Cardiomegaly", "Lung Opacity"])
    assert list(json.loads(text)["findings"]) == ["Lung Opacity", "Cardiomegaly"]


def test_serialize_empty_subset():
    with pytest.raises(ums.EmptyQueryError):
        ums.serialize_canonical(example_record(), [])


def test_serialize_injective_on_subsets():
    r = example_record()
    names = CXR.finding_names
    seen = {}
    for k in range(1, len(names) + 1):
        for sub in itertools.combinations(names, k):
            text = ums.serialize_canonical(r, sub)
            assert text not in seen, (sub, seen.get(text))
            seen[text] = sub


# --- parse_validate ---------------------------------------------------------


def test_parse_listing_example_equals_build():
    text = ums.serialize_canonical(example_record())
    assert ums.parse_validate(text, CXR) == example_record()


def test_parse_accepts_whitespace():
    pretty = json.dumps(json.loads(ums.serialize_canonical(example_record())), indent=3)
    assert ums.parse_validate(pretty, CXR) == example_record()


def test_parse_rejects_invalid_state():
    text = ums.serialize_canonical(example_record()).replace('"uncertain"', '"maybe"')
    with pytest.raises(ums.InvalidStateError):
        ums.parse_validate(text, CXR)


def test_parse_syntax_error_reports_byte_offset():
    text = '{"findings":{"Pneumonia":{"state":"present"}},"answerability":{"Pneumonia":tru}}'
    with pytest.raises(ums.UmsSyntaxError) as exc:
        ums.parse_validate(text, CXR)
    assert exc.value.offset == text.index("tru")


def test_parse_syntax_offset_counts_bytes_not_characters():
    schema = SchemaConfig(("Ödem",))
    text = '{"findings":{"Ödem":{"state":"present"}},"answerability":{"Ödem":tru}}'
    with pytest.raises(ums.UmsSyntaxError) as exc:
        ums.parse_validate(text, schema)
    assert exc.value.offset == text.encode().index(b"tru")


def test_parse_rejects_unknown_finding():
    text = '{"findings":{"Fracture":{"state":"present"}},"answerability":{"Fracture":true}}'
    with pytest.raises(ums.SchemaError):
        ums.parse_validate(text, CXR)


@pytest.mark.parametrize(
    "text",
    [
        '{"answerability":{"Pneumonia":true},"findings":{"Pneumonia":{"state":"present"}}}',
        '{"findings":{"Pneumonia":{"state":"present"}},"answerability":{"Cardiomegaly":false}}',
        '{"findings":{"Cardiomegaly":{"state":null},"Pneumonia":{"state":"present"}},'
        '"answerability":{"Cardiomegaly":false,"Pneumonia":true}}',
        '{"findings":{"Pneumonia":{"state":"present"}},"answerability":{"Pneumonia":1}}',
        '{"findings":{"Pneumonia":{"state":"present","x":1}},"answerability":{"Pneumonia":true}}',
        '{"findings":{"Pneumonia":{"state":"present"},"Pneumonia":{"state":"present"}},'
        '"answerability":{"Pneumonia":true,"Pneumonia":true}}',
        "[]",
    ],
)
def test_parse_rejects_non_canonical_structure(text):
    with pytest.raises(ums.UmsError):
        ums.parse_validate(text, CXR)


def _doc(state, answerable):
    s = "null" if state is None else json.dumps(state)
    a = "true" if answerable else "false"
    return f'{{"findings":{{"Cardiomegaly":{{"state":{s}}}}},"answerability":{{"Cardiomegaly":{a}}}}}'


@pytest.mark.parametrize("state", ["present", "absent", "uncertain", None])
@pytest.mark.parametrize("answerable", [True, False])
def test_state_answerability_combinations(state, answerable):
    text = _doc(state, answerable)
    if (state is None) == answerable:
        with pytest.raises(ums.ConsistencyError):
            ums.parse_validate(text, CXR)
    else:
        r = ums.parse_validate(text, CXR)
        assert r.findings["Cardiomegaly"] is FindingState(state)


def test_record_constructor_enforces_consistency():
    with pytest.raises(ums.ConsistencyError):
        ums.UmsRecord("x", {"A": FindingState.PRESENT}, {"A": False})
    with pytest.raises(ums.ConsistencyError):
        ums.UmsRecord("x", {"A": FindingState.PRESENT}, {"B": True})


# --- round-trip property ----------------------------------------------------

finding_name = st.text(min_size=1, max_size=12)
state_st = st.sampled_from(list(FindingState))


@st.composite
def records(draw):
    names = draw(st.lists(finding_name, min_size=1, max_size=8, unique=True))
    schema = SchemaConfig(tuple(names))
    states = [draw(state_st) for _ in names]
    rec = ums.UmsRecord("", dict(zip(names, states)), {n: s.answerable for n, s in zip(names, states)})
    return schema, rec


@settings(max_examples=300, deadline=None)
@given(records())
def test_round_trip(pair):
    schema, rec = pair
    text = ums.serialize_canonical(rec)
    assert ums.parse_validate(text, schema) == rec
    assert ums.serialize_canonical(ums.parse_validate(text, schema)) == text


@settings(max_examples=200, deadline=None)
@given(records(), st.data())
def test_round_trip_of_subsets(pair, data):
    schema, rec = pair
    sub = data.draw(st.lists(st.sampled_from(schema.finding_names), min_size=1, unique=True))
    parsed = ums.parse_validate(ums.serialize_canonical(rec, sub), schema)
    assert parsed == rec.restrict(sub)


# --- tokenizer --------------------------------------------------------------


def test_tokenize_hand_cases():
    assert ums.tokenize("") == [BOS, EOS]
    assert ums.tokenize("{}") == [BOS, 123, 125, EOS]
    assert ums.tokenize("é") == [BOS, 0xC3, 0xA9, EOS]
    assert (ums.BOS, ums.EOS, ums.PAD, ums.SEP, ums.VOCAB_SIZE) == (256, 257, 258, 259, 260)


@settings(max_examples=1000, deadline=None)
@given(st.text())
def test_tokenize_round_trip(s):
    ids = ums.tokenize(s)
    assert all(0 <= i < 256 for i in ids[1:-1])
    assert ums.decode(ids) == s


# --- answerability weights --------------------------------------------------


def _span_by_search(text: str, name: str) -> tuple[int, int]:
    """Locate a finding's key+value in the findings block with str.find only."""
    block_end = text.index('},"answerability":')
    piece = json.dumps(name, ensure_ascii=False) + ":{"
    start = text.index(piece)
    assert start < block_end
    end = text.index("}", start + len(piece)) + 1
    return len(text[:start].encode()) + 1, len(text[:end].encode()) + 1


def test_weights_listing_example():
    r = example_record()
    sup = ums.supervision_for(r)
    text = ums.serialize_canonical(r)
    a, b = _span_by_search(text, "Cardiomegaly")
    assert ums.decode(sup.token_ids[a:b]) == '"Cardiomegaly":{"state":null}'
    assert np.all(sup.weights[a:b] == 0)
    assert int((sup.weights == 0).sum()) == b - a
    assert sup.spans["Cardiomegaly"] == (a, b)


def test_weights_all_answerable():
    r = ums.build_record(dict.fromkeys(CXR.finding_names, 1.0), CXR)
    assert np.all(ums.supervision_for(r).weights == 1)


def test_weights_reject_misaligned_tokens():
    r = example_record()
    ids = ums.tokenize(ums.serialize_canonical(r))
    with pytest.raises(ums.SpanAlignmentError):
        ums.answerability_weights(r, None, ids[:-1])
    ids[5] += 1
    with pytest.raises(ums.SpanAlignmentError):
        ums.answerability_weights(r, None, ids)


@settings(max_examples=300, deadline=None)
@given(records(), st.data())
def test_weights_match_substring_oracle(pair, data):
    schema, rec = pair
    sub = data.draw(st.lists(st.sampled_from(schema.finding_names), min_size=1, unique=True))
    sup = ums.supervision_for(rec, sub)
    text = ums.serialize_canonical(rec, sub)
    expected = np.ones(len(sup))
    for n in sub:
        if not rec.answerability[n]:
            a, b = _span_by_search(text, n)
            expected[a:b] = 0
    assert np.array_equal(sup.weights, expected)
    assert set(np.unique(sup.weights)) <= {0.0, 1.0}


# --- sampler ----------------------------------------------------------------


def balanced12():
    names = tuple(f"F{i:02d}" for i in range(12))
    return SchemaConfig(names, {n: (0.05 if i < 6 else 0.4) for i, n in enumerate(names)})


def test_sampler_pools_split_at_median():
    low, high = ums.frequency_pools(balanced12())
    assert low == [f"F{i:02d}" for i in range(6)]
    assert high == [f"F{i:02d}" for i in range(6, 12)]


def test_sampler_deterministic():
    s = balanced12()
    assert ums.sample_fields(s, 123) == ums.sample_fields(s, 123)


def test_sampler_zero_low_prob_stays_high():
    s = balanced12()
    _, high = ums.frequency_pools(s)
    for seed in range(200):
        assert set(ums.sample_fields(s, seed, low_freq_prob=0.0)) <= set(high)


def test_sampler_without_prevalence_uses_one_pool():
    s = SchemaConfig(tuple("ABCDEF"))
    for seed in range(50):
        out = ums.sample_fields(s, seed)
        assert 4 <= len(out) <= 6 and len(set(out)) == len(out)


def test_sampler_insufficient_fields():
    with pytest.raises(ums.InsufficientFieldsError):
        ums.sample_fields(SchemaConfig(tuple("ABCDE")), 0)


def test_sampler_statistics():
    s = balanced12()
    low = set(ums.frequency_pools(s)[0])
    order = {n: i for i, n in enumerate(s.finding_names)}
    drawn = low_drawn = 0
    ks = set()
    for seed in range(10_000):
        out = ums.sample_fields(s, seed)
        ks.add(len(out))
        assert len(set(out)) == len(out)
        assert [order[n] for n in out] == sorted(order[n] for n in out)
        drawn += len(out)
        low_drawn += sum(n in low for n in out)
    assert ks == {4, 5, 6}
    assert abs(low_drawn / drawn - 0.6) <= 0.02


# --- CSV / JSONL ------------------------------------------------------------


CSV_TEXT = "image_id,Lung Opacity,Pneumonia,Pleural Effusion,Cardiomegaly\nimg1,1.0,-1.0,1.0,\nimg2,0,0,,1\n"


def test_read_label_csv():
    schema, recs = ums.read_label_csv(io.StringIO(CSV_TEXT))
    assert schema.finding_names == CXR.finding_names
    assert recs[0].image_id == "img1"
    assert recs[0].findings == example_record().findings
    assert recs[1].findings["Pleural Effusion"] is FindingState.NULL


def test_read_label_csv_errors_carry_line_number():
    with pytest.raises(ums.LabelFormatError, match="line 2"):
        ums.read_label_csv(io.StringIO("image_id,A\nx,7\n"))
    with pytest.raises(ums.LabelFormatError):
        ums.read_label_csv(io.StringIO("id,A\n"))
    with pytest.raises(ums.LabelFormatError):
        ums.read_label_csv(io.StringIO("image_id,A\nx,1,1\n"))


def test_jsonl_round_trip():
    schema, recs = ums.read_label_csv(io.StringIO(CSV_TEXT))
    buf = io.StringIO()
    ums.write_jsonl(recs, buf)
    assert '"Cardiomegaly":false' in buf.getvalue()
    back = ums.read_jsonl(io.StringIO(buf.getvalue()), schema)
    assert back == recs


def test_compute_prevalence():
    schema, recs = ums.read_label_csv(io.StringIO(CSV_TEXT))
    prev = ums.compute_prevalence(recs, schema)
    assert prev == {"Lung Opacity": 0.5, "Pneumonia": 0.0, "Pleural Effusion": 1.0, "Cardiomegaly": 1.0}
