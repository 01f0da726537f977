"""Teacher-forced targets: the structured UMS form and a flat free-text form.

The free-text form exists for the supervision ablation: same findings, but
natural-language phrasing with varied wording, no answerability masking and
its own instruction verb so the two output formats are distinguishable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from structvit import ums
from structvit.ums import FindingState, SupervisionSequence, UmsRecord

INSTRUCTION_PREFIX = "Report the state of: "
FREE_TEXT_PREFIX = "Describe the state of: "

_PHRASES = {
    FindingState.PRESENT: ("{} is present", "{} is seen", "there is {}"),
    FindingState.ABSENT: ("no {}", "{} is absent", "{} is not seen"),
    FindingState.UNCERTAIN: ("possible {}", "{} cannot be excluded"),
    FindingState.NULL: ("{} is not assessable",),
}

SUPERVISION_MODES = ("ums", "free_text")


@dataclass
class Target:
    instruction_ids: np.ndarray
    seq: SupervisionSequence


def instruction_ids(fields: Sequence[str], prefix: str = INSTRUCTION_PREFIX) -> np.ndarray:
    return np.frombuffer((prefix + ", ".join(fields)).encode("utf-8"), dtype=np.uint8).astype(np.int64)


def ums_target(record: UmsRecord, fields: Sequence[str]) -> Target:
    return Target(instruction_ids(fields), ums.supervision_for(record, fields))


def free_text(record: UmsRecord, fields: Sequence[str], rng: np.random.Generator) -> str:
    parts = []
    for name in record.findings:
        if name in fields:
            options = _PHRASES[record.findings[name]]
            parts.append(options[int(rng.integers(len(options)))].format(name))
    text = ". ".join(parts) + "."
    return text[0].upper() + text[1:]


def free_text_target(record: UmsRecord, fields: Sequence[str], rng: np.random.Generator) -> Target:
    ids = ums.tokenize(free_text(record, fields, rng))
    seq = SupervisionSequence(ids, np.ones(len(ids)), {}, tuple(fields))
    return Target(instruction_ids(fields, FREE_TEXT_PREFIX), seq)


def make_target(record: UmsRecord, fields: Sequence[str], mode: str, rng: np.random.Generator) -> Target:
    if mode == "ums":
        return ums_target(record, fields)
    if mode == "free_text":
        return free_text_target(record, fields, rng)
    raise ValueError(f"unknown supervision mode {mode!r}; expected one of {SUPERVISION_MODES}")
