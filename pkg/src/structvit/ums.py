"""Unified Medical Schema records: build, serialize, parse, tokenize, weight, sample.

A record holds one image's finding states plus a boolean answerability mask.
Its canonical serialization is compact JSON with two blocks, ``findings``
then ``answerability``, keys in schema order::

    {"findings":{"Pneumonia":{"state":"uncertain"},"Cardiomegaly":{"state":null}},
     "answerability":{"Pneumonia":true,"Cardiomegaly":false}}

(shown wrapped; the real form has no whitespace).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

BOS, EOS, PAD, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260


class UmsError(ValueError):
    pass


class LabelFormatError(UmsError):
    pass


class EmptyQueryError(UmsError):
    pass


class UmsSyntaxError(UmsError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class SchemaError(UmsError):
    pass


class InvalidStateError(UmsError):
    pass


class ConsistencyError(UmsError):
    pass


class SpanAlignmentError(UmsError):
    pass


class InsufficientFieldsError(UmsError):
    pass


class FindingState(enum.Enum):
    PRESENT = "present"
    ABSENT = "absent"
    UNCERTAIN = "uncertain"
    NULL = None

    @property
    def answerable(self) -> bool:
        return self is not FindingState.NULL


_RAW_TO_STATE = {1.0: FindingState.PRESENT, 0.0: FindingState.ABSENT, -1.0: FindingState.UNCERTAIN}
_STATE_STRINGS = {s.value: s for s in FindingState if s.value is not None}


@dataclass(frozen=True)
class SchemaConfig:
    finding_names: tuple[str, ...]
    prevalence: Mapping[str, float] | None = None

    def __post_init__(self) -> None:
        names = tuple(self.finding_names)
        object.__setattr__(self, "finding_names", names)
        if not names:
            raise SchemaError("schema has no findings")
        if any(not n for n in names):
            raise SchemaError("finding names must be nonempty")
        if len(set(names)) != len(names):
            raise SchemaError("finding names must be unique")
        if self.prevalence is not None:
            missing = [n for n in names if n not in self.prevalence]
            if missing:
                raise SchemaError(f"prevalence missing for {missing}")
            for n in names:
                p = self.prevalence[n]
                if not 0.0 <= p <= 1.0:
                    raise SchemaError(f"prevalence of {n!r} outside [0,1]: {p}")

    def index(self, name: str) -> int:
        try:
            return self.finding_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown finding {name!r}") from None

    def to_json(self) -> str:
        doc: dict = {"findings": list(self.finding_names)}
        if self.prevalence is not None:
            doc["prevalence"] = {n: self.prevalence[n] for n in self.finding_names}
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SchemaConfig":
        doc = json.loads(text)
        if not isinstance(doc, dict) or "findings" not in doc:
            raise SchemaError('schema JSON needs a "findings" list')
        return cls(tuple(doc["findings"]), doc.get("prevalence"))

    @classmethod
    def load(cls, path: str | Path) -> "SchemaConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass
class UmsRecord:
    image_id: str
    findings: dict[str, FindingState]
    answerability: dict[str, bool]

    def __post_init__(self) -> None:
        if list(self.findings) != list(self.answerability):
            raise ConsistencyError("findings and answerability blocks must have identical keys in the same order")
        for name, state in self.findings.items():
            _check_consistent(name, state, self.answerability[name])

    def restrict(self, fields: Sequence[str]) -> "UmsRecord":
        keep = set(fields)
        names = [n for n in self.findings if n in keep]
        return UmsRecord(self.image_id, {n: self.findings[n] for n in names}, {n: self.answerability[n] for n in names})


def _check_consistent(name: str, state: FindingState, answerable: bool) -> None:
    if not isinstance(answerable, bool):
        raise ConsistencyError(f"answerability of {name!r} must be boolean")
    if state.answerable != answerable:
        raise ConsistencyError(f"{name!r}: state {state.value!r} inconsistent with answerability {answerable}")


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, str):
        return v.strip() == ""
    return isinstance(v, float) and math.isnan(v)


def build_record(labels: Mapping[str, float | str | None], schema: SchemaConfig, image_id: str = "") -> UmsRecord:
    """Map the {1.0, 0.0, -1.0, blank} label convention onto a record."""
    unknown = [k for k in labels if k not in schema.finding_names]
    if unknown:
        raise SchemaError(f"unknown findings in labels: {unknown}")
    findings: dict[str, FindingState] = {}
    answerability: dict[str, bool] = {}
    for name in schema.finding_names:
        raw = labels.get(name)
        if _is_missing(raw):
            state = FindingState.NULL
        else:
            try:
                state = _RAW_TO_STATE[float(raw)]
            except (KeyError, ValueError, TypeError):
                raise LabelFormatError(f"finding {name!r}: label {raw!r} not in {{1.0, 0.0, -1.0, blank}}") from None
        findings[name] = state
        answerability[name] = state.answerable
    return UmsRecord(image_id, findings, answerability)


# ---------------------------------------------------------------------------
# canonical serialization
# ---------------------------------------------------------------------------


def _jstr(s: str) -> str:
    return json.dumps(s, ensure_ascii=False)


def _serialize_with_spans(record: UmsRecord, fields: Sequence[str] | None) -> tuple[str, dict[str, tuple[int, int]]]:
    """Canonical text plus the byte range of each finding's key+value in the findings block."""
    if fields is None:
        names = list(record.findings)
    else:
        if len(fields) == 0:
            raise EmptyQueryError("field subset is empty")
        extra = [f for f in fields if f not in record.findings]
        if extra:
            raise SchemaError(f"queried fields not in record: {extra}")
        keep = set(fields)
        names = [n for n in record.findings if n in keep]
    buf = bytearray(b'{"findings":{')
    spans: dict[str, tuple[int, int]] = {}
    for i, n in enumerate(names):
        if i:
            buf += b","
        state = record.findings[n].value
        start = len(buf)
        buf += f'{_jstr(n)}:{{"state":{"null" if state is None else _jstr(state)}}}'.encode()
        spans[n] = (start, len(buf))
    buf += b'},"answerability":{'
    buf += ",".join(f"{_jstr(n)}:{'true' if record.answerability[n] else 'false'}" for n in names).encode()
    buf += b"}}"
    return buf.decode("utf-8"), spans


def serialize_canonical(record: UmsRecord, fields: Sequence[str] | None = None) -> str:
    return _serialize_with_spans(record, fields)[0]


class _Pairs(list):
    """A JSON object kept as an ordered list of (key, value) pairs."""


def _reject_duplicates(pairs):
    keys = [k for k, _ in pairs]
    if len(set(keys)) != len(keys):
        dup = next(k for k in keys if keys.count(k) > 1)
        raise SchemaError(f"duplicate key {dup!r}")
    return _Pairs(pairs)


def parse_validate(text: str, schema: SchemaConfig, image_id: str = "") -> UmsRecord:
    """Parse a UMS document and enforce the schema and consistency rules."""
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise UmsSyntaxError(f"malformed JSON: {exc.msg}", offset) from None
    if not isinstance(doc, _Pairs) or [k for k, _ in doc] != ["findings", "answerability"]:
        raise SchemaError('top level must be an object with keys "findings" then "answerability"')
    (_, fblock), (_, ablock) = doc
    if not isinstance(fblock, _Pairs) or not isinstance(ablock, _Pairs):
        raise SchemaError("findings and answerability must be objects")
    fnames = [k for k, _ in fblock]
    anames = [k for k, _ in ablock]
    for n in fnames + anames:
        schema.index(n)
    if fnames != anames:
        raise SchemaError("findings and answerability blocks have different keys")
    order = [schema.index(n) for n in fnames]
    if order != sorted(order):
        raise SchemaError("findings are not in schema order")
    if not fnames:
        raise EmptyQueryError("record has no findings")

    findings: dict[str, FindingState] = {}
    answerability: dict[str, bool] = {}
    for (name, fval), (_, aval) in zip(fblock, ablock):
        if not isinstance(fval, _Pairs) or [k for k, _ in fval] != ["state"]:
            raise SchemaError(f'finding {name!r} must be {{"state": ...}}')
        raw = fval[0][1]
        if raw is None:
            state = FindingState.NULL
        elif isinstance(raw, str) and raw in _STATE_STRINGS:
            state = _STATE_STRINGS[raw]
        else:
            raise InvalidStateError(f"finding {name!r}: invalid state {raw!r}")
        if not isinstance(aval, bool):
            raise SchemaError(f"answerability of {name!r} must be true/false")
        _check_consistent(name, state, aval)
        findings[name] = state
        answerability[name] = aval
    return UmsRecord(image_id, findings, answerability)


# ---------------------------------------------------------------------------
# tokenization and answerability weights
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list[int]:
    return [BOS, *text.encode("utf-8"), EOS]


def decode(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if i < 256).decode("utf-8")


@dataclass
class SupervisionSequence:
    token_ids: np.ndarray
    weights: np.ndarray
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)
    queried_fields: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        self.token_ids = np.asarray(self.token_ids, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.token_ids.shape != self.weights.shape:
            raise ValueError("token_ids and weights must have equal length")

    def __len__(self) -> int:
        return int(self.token_ids.size)


def answerability_weights(record: UmsRecord, fields: Sequence[str] | None, token_ids: Sequence[int]) -> SupervisionSequence:
    """Zero the loss weight of every token in an unanswerable queried finding's span.

    Spans are token ranges ``[start, end)`` over ``token_ids`` (offset by the
    leading BOS). Structure tokens and the answerability block keep weight 1.
    """
    text, byte_spans = _serialize_with_spans(record, fields)
    expected = tokenize(text)
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size != len(expected) or not np.array_equal(ids, expected):
        raise SpanAlignmentError("token sequence does not match the canonical serialization")
    weights = np.ones(ids.size)
    spans = {n: (a + 1, b + 1) for n, (a, b) in byte_spans.items()}
    for n, (a, b) in spans.items():
        if not record.answerability[n]:
            weights[a:b] = 0.0
    return SupervisionSequence(ids, weights, spans, tuple(spans))


def supervision_for(record: UmsRecord, fields: Sequence[str] | None = None) -> SupervisionSequence:
    """serialize -> tokenize -> weight in one call."""
    return answerability_weights(record, fields, tokenize(serialize_canonical(record, fields)))


# ---------------------------------------------------------------------------
# field query sampling
# ---------------------------------------------------------------------------


def frequency_pools(schema: SchemaConfig) -> tuple[list[str], list[str]]:
    """(low, high): low holds findings with prevalence strictly below the median."""
    names = list(schema.finding_names)
    if schema.prevalence is None:
        return [], names
    prev = np.array([schema.prevalence[n] for n in names])
    med = float(np.median(prev))
    low = [n for n, p in zip(names, prev) if p < med]
    high = [n for n, p in zip(names, prev) if p >= med]
    return low, high


def sample_fields(
    schema: SchemaConfig,
    seed: int | np.random.Generator,
    k_range: tuple[int, int] = (4, 6),
    low_freq_prob: float = 0.6,
) -> tuple[str, ...]:
    """Draw k ~ U{k_min..k_max} distinct findings, picking the low-frequency
    pool with probability ``low_freq_prob`` on each draw.

    Returned in schema order.
    """
    kmin, kmax = k_range
    if not 1 <= kmin <= kmax:
        raise ValueError(f"bad k_range {k_range}")
    n = len(schema.finding_names)
    if n < kmax:
        raise InsufficientFieldsError(f"schema has {n} findings, sampler needs up to {kmax}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(rng.integers(kmin, kmax + 1))
    low, high = (list(p) for p in frequency_pools(schema))
    chosen: list[str] = []
    for _ in range(k):
        if low and high:
            pool = low if rng.random() < low_freq_prob else high
        else:
            pool = low or high
        chosen.append(pool.pop(int(rng.integers(len(pool)))))
    order = {name: i for i, name in enumerate(schema.finding_names)}
    return tuple(sorted(chosen, key=order.__getitem__))


def compute_prevalence(records: Iterable[UmsRecord], schema: SchemaConfig) -> dict[str, float]:
    """Fraction of answerable labels that are ``present``, per finding."""
    pos = dict.fromkeys(schema.finding_names, 0)
    tot = dict.fromkeys(schema.finding_names, 0)
    for r in records:
        for n, s in r.findings.items():
            if s.answerable:
                tot[n] += 1
                pos[n] += s is FindingState.PRESENT
    return {n: (pos[n] / tot[n] if tot[n] else 0.0) for n in schema.finding_names}


# ---------------------------------------------------------------------------
# CSV / JSONL interchange
# ---------------------------------------------------------------------------


def read_label_csv(source: str | Path | io.TextIOBase, schema: SchemaConfig | None = None) -> tuple[SchemaConfig, list[UmsRecord]]:
    """Read ``image_id,<finding...>`` rows; the header defines the schema unless one is given."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return read_label_csv(fh, schema)
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise LabelFormatError("empty CSV") from None
    if not header or header[0] != "image_id":
        raise LabelFormatError('CSV header must start with "image_id"')
    names = header[1:]
    if schema is None:
        schema = SchemaConfig(tuple(names))
    records = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise LabelFormatError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            records.append(build_record(dict(zip(names, row[1:])), schema, image_id=row[0]))
        except LabelFormatError as exc:
            raise LabelFormatError(f"line {lineno}: {exc}") from None
    return schema, records


def jsonl_line(record: UmsRecord) -> str:
    return f'{{"image_id": {_jstr(record.image_id)}, "ums": {serialize_canonical(record)}}}'


def write_jsonl(records: Iterable[UmsRecord], fh: io.TextIOBase) -> None:
    for r in records:
        fh.write(jsonl_line(r) + "\n")


def read_jsonl(fh: Iterable[str], schema: SchemaConfig) -> list[UmsRecord]:
    out = []
    for line in fh:
        if not line.strip():
            continue
        doc = json.loads(line)
        out.append(parse_validate(json.dumps(doc["ums"]), schema, image_id=doc["image_id"]))
    return out
