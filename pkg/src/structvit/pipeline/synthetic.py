"""Planted-signal images paired with UMS records.

Each finding owns one cell of a square grid over the image. The cell's
brightness encodes the state: present ~0.8, uncertain ~0.45, absent ~0.1,
plus Gaussian noise. Unassessable (null) cells are uniform noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from structvit.model.checkpoint import atomic_write_bytes
from structvit.ums import FindingState, SchemaConfig, UmsRecord, compute_prevalence, jsonl_line, read_jsonl

DEFAULT_NAMES = ("Opacity", "Effusion", "Nodule", "Edema")

LEVELS = {FindingState.PRESENT: 0.8, FindingState.UNCERTAIN: 0.45, FindingState.ABSENT: 0.1}


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_samples: int = 2000
    num_findings: int = 4
    image_size: int = 32
    noise_std: float = 0.05
    p_uncertain: float = 0.1
    p_null: float = 0.1
    p_present: float = 0.5
    seed: int = 0
    finding_names: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if not 1 <= self.num_findings:
            raise ValueError("num_findings must be >= 1")
        if self.image_size % self.grid:
            raise ValueError(f"image_size {self.image_size} not divisible into a {self.grid}x{self.grid} grid")
        if not (0 <= self.p_null <= 1 and 0 <= self.p_uncertain <= 1 and self.p_null + self.p_uncertain <= 1):
            raise ValueError("need 0 <= p_null, p_uncertain and p_null + p_uncertain <= 1")
        if not 0 <= self.p_present <= 1:
            raise ValueError("p_present must lie in [0, 1]")
        if self.finding_names and len(self.finding_names) != self.num_findings:
            raise ValueError("finding_names must list num_findings names")

    @property
    def grid(self) -> int:
        return math.ceil(math.sqrt(self.num_findings))

    @property
    def cell(self) -> int:
        return self.image_size // self.grid

    @property
    def names(self) -> tuple[str, ...]:
        if self.finding_names:
            return tuple(self.finding_names)
        if self.num_findings <= len(DEFAULT_NAMES):
            return DEFAULT_NAMES[: self.num_findings]
        return tuple(f"Finding{i}" for i in range(self.num_findings))

    def region(self, i: int) -> tuple[slice, slice]:
        r, c = divmod(i, self.grid)
        s = self.cell
        return slice(r * s, (r + 1) * s), slice(c * s, (c + 1) * s)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    images: np.ndarray
    records: list[UmsRecord]
    schema: SchemaConfig

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "Dataset":
        idx = list(idx)
        return Dataset(self.images[idx], [self.records[i] for i in idx], self.schema)


def generate_dataset(spec: SyntheticDatasetSpec) -> Dataset:
    rng = np.random.default_rng(spec.seed)
    names = spec.names
    n, F, S = spec.num_samples, spec.num_findings, spec.image_size
    p_ans = 1.0 - spec.p_null - spec.p_uncertain
    probs = np.array([spec.p_null, spec.p_uncertain, p_ans * spec.p_present, p_ans * (1 - spec.p_present)])
    kinds = (FindingState.NULL, FindingState.UNCERTAIN, FindingState.PRESENT, FindingState.ABSENT)
    draws = rng.choice(4, size=(n, F), p=probs)
    images = np.clip(rng.normal(LEVELS[FindingState.ABSENT], spec.noise_std, size=(n, S, S)), 0.0, 1.0)
    records = []
    for j in range(n):
        findings, answerable = {}, {}
        for i, name in enumerate(names):
            state = kinds[draws[j, i]]
            rs, cs = spec.region(i)
            if state is FindingState.NULL:
                images[j, rs, cs] = rng.uniform(0.0, 1.0, size=(spec.cell, spec.cell))
            else:
                images[j, rs, cs] = np.clip(LEVELS[state] + rng.normal(0.0, spec.noise_std, size=(spec.cell, spec.cell)), 0.0, 1.0)
            findings[name] = state
            answerable[name] = state.answerable
        records.append(UmsRecord(f"syn{spec.seed}_{j:06d}", findings, answerable))
    schema = SchemaConfig(names)
    schema = SchemaConfig(names, compute_prevalence(records, schema))
    return Dataset(images, records, schema)


def recover_states(image: np.ndarray, spec: SyntheticDatasetSpec, thresholds=(0.275, 0.625)) -> list[FindingState]:
    """Threshold each region's mean back into a state (valid for answerable findings)."""
    lo, hi = thresholds
    out = []
    for i in range(spec.num_findings):
        rs, cs = spec.region(i)
        m = float(image[rs, cs].mean())
        out.append(FindingState.ABSENT if m < lo else FindingState.UNCERTAIN if m < hi else FindingState.PRESENT)
    return out


def probe_labels(records: list[UmsRecord], schema: SchemaConfig) -> tuple[np.ndarray, np.ndarray]:
    """(labels, mask): present/uncertain -> 1, absent -> 0; mask False where unanswerable."""
    n, F = len(records), len(schema.finding_names)
    y = np.zeros((n, F))
    mask = np.zeros((n, F), dtype=bool)
    for j, r in enumerate(records):
        for i, name in enumerate(schema.finding_names):
            s = r.findings[name]
            mask[j, i] = s.answerable
            y[j, i] = float(s in (FindingState.PRESENT, FindingState.UNCERTAIN))
    return y, mask


def save_dataset(ds: Dataset, out_dir: str | Path) -> None:
    import io

    out = Path(out_dir)
    buf = io.BytesIO()
    np.save(buf, ds.images)
    atomic_write_bytes(out / "images.npy", buf.getvalue())
    atomic_write_bytes(out / "labels.jsonl", "".join(jsonl_line(r) + "\n" for r in ds.records).encode("utf-8"))
    atomic_write_bytes(out / "schema.json", (ds.schema.to_json() + "\n").encode("utf-8"))


def load_dataset(in_dir: str | Path) -> Dataset:
    d = Path(in_dir)
    schema = SchemaConfig.load(d / "schema.json")
    with open(d / "labels.jsonl", encoding="utf-8") as fh:
        records = read_jsonl(fh, schema)
    images = np.load(d / "images.npy")
    if images.shape[0] != len(records):
        raise ValueError(f"{images.shape[0]} images but {len(records)} records")
    if not schema.prevalence:
        schema = SchemaConfig(schema.finding_names, compute_prevalence(records, schema))
    return Dataset(images, records, schema)


def spec_from_json(text: str) -> SyntheticDatasetSpec:
    doc = json.loads(text)
    if "finding_names" in doc:
        doc["finding_names"] = tuple(doc["finding_names"])
    return SyntheticDatasetSpec(**doc)
