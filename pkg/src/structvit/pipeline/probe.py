"""Linear probe on frozen CLS embeddings of an exported backbone.

Only the encoder, the checkpoint container and the metrics are imported here;
the projector and teacher code are never needed to evaluate a backbone.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from structvit.model import layers, vit
from structvit.model.checkpoint import atomic_write_bytes, load_backbone, load_container, save_container
from structvit.model.optim import AdamW
from structvit.numerics import Tensor
from structvit.pipeline import metrics
from structvit.pipeline.synthetic import Dataset, probe_labels

PROBE_PREFIX = "probe"


@dataclass
class ProbeResult:
    class_names: list[str]
    auc: list[float | None]
    f1: list[float | None]
    support: list[int]
    positives: list[int]
    macro_auc: float
    macro_f1: float
    skipped: list[str] = field(default_factory=list)
    steps: int = 0
    seed: int = 0
    num_train: int = 0
    num_test: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ProbeResult":
        return cls(**json.loads(text))


def worker_count() -> int:
    """Thread cap from ``VIVID_THREADS`` (default 1)."""
    raw = os.environ.get("VIVID_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VIVID_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"VIVID_THREADS must be a positive integer, got {raw!r}")
    return n


def cls_features(images: np.ndarray, params: layers.Params, cfg: vit.VitConfig) -> np.ndarray:
    """CLS embeddings, forward only; images are split into contiguous chunks per worker."""
    n = worker_count()
    if n == 1 or len(images) < 2 * n:
        return vit.cls_embeddings(images, params, cfg)
    chunks = np.array_split(np.arange(len(images)), n)
    with ThreadPoolExecutor(max_workers=n) as pool:
        parts = list(pool.map(lambda idx: vit.cls_embeddings(images[idx], params, cfg), chunks))
    return np.concatenate(parts)


def split_indices(n: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(round(train_frac * n))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


@dataclass
class LinearHead:
    """Sigmoid classifier on standardized features."""

    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, feats: np.ndarray) -> np.ndarray:
        z = ((feats - self.mean) / self.scale) @ self.weight + self.bias
        return 1.0 / (1.0 + np.exp(-z))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            f"{PROBE_PREFIX}.weight": self.weight,
            f"{PROBE_PREFIX}.bias": self.bias[None, :],
            f"{PROBE_PREFIX}.mean": self.mean[None, :],
            f"{PROBE_PREFIX}.scale": self.scale[None, :],
        }

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray]) -> "LinearHead":
        p = PROBE_PREFIX
        return cls(a[f"{p}.weight"], a[f"{p}.bias"][0], a[f"{p}.mean"][0], a[f"{p}.scale"][0])


def fit_head(feats: np.ndarray, labels: np.ndarray, mask: np.ndarray, steps: int, lr: float = 1e-3) -> LinearHead:
    """Full-batch AdamW on masked per-class binary cross-entropy."""
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = (feats - mean) / scale
    n, d = x.shape
    c = labels.shape[1]
    w = Tensor(np.zeros((d, c)), requires_grad=True, name=f"{PROBE_PREFIX}.weight")
    b = Tensor(np.zeros((1, c)), requires_grad=True, name=f"{PROBE_PREFIX}.bias")
    params = {w.name: w, b.name: b}
    opt = AdamW({PROBE_PREFIX: lr}, total_steps=steps)
    m = mask.astype(np.float64)
    denom = max(m.sum(), 1.0)
    for step in range(steps):
        p = 1.0 / (1.0 + np.exp(-(x @ w.value + b.value)))
        # d(BCE)/d(logit) = p - y, restricted to answerable entries
        dz = (p - labels) * m / denom
        w.grad[...] = x.T @ dz
        b.grad[...] = dz.sum(axis=0, keepdims=True)
        opt.step(params, step)
    return LinearHead(w.value.copy(), b.value[0].copy(), mean, scale)


def evaluate_head(
    head: LinearHead,
    feats: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
    class_names: list[str],
) -> ProbeResult:
    scores = head.scores(feats)
    aucs, skipped = metrics.per_class_auc(scores, labels, mask)
    f1s = metrics.per_class_f1(scores, labels, 0.5, mask)
    kept = [a for a in aucs if a is not None]
    f1_kept = [f for f, a in zip(f1s, aucs) if a is not None and f is not None]
    return ProbeResult(
        class_names=list(class_names),
        auc=aucs,
        f1=f1s,
        support=[int(v) for v in mask.sum(axis=0)],
        positives=[int(v) for v in (labels.astype(bool) & mask).sum(axis=0)],
        macro_auc=float(np.mean(kept)) if kept else float("nan"),
        macro_f1=float(np.mean(f1_kept)) if f1_kept else 0.0,
        skipped=[class_names[c] for c in skipped],
        num_test=int(feats.shape[0]),
    )


def linear_probe(
    backbone_path: str | Path,
    ds: Dataset,
    steps: int = 3000,
    seed: int = 0,
    lr: float = 1e-3,
    shuffle_labels: bool = False,
) -> tuple[ProbeResult, LinearHead]:
    """Train a linear head on 80% of ``ds`` and report metrics on the rest.

    ``shuffle_labels`` permutes label rows before splitting, as a leakage check.
    """
    cfg, params = load_backbone(backbone_path)
    feats = cls_features(ds.images, params, cfg)
    labels, mask = probe_labels(ds.records, ds.schema)
    if shuffle_labels:
        perm = np.random.default_rng([seed, 1]).permutation(len(ds))
        labels, mask = labels[perm], mask[perm]
    tr, te = split_indices(len(ds), seed)
    head = fit_head(feats[tr], labels[tr], mask[tr], steps, lr)
    result = evaluate_head(head, feats[te], labels[te], mask[te], list(ds.schema.finding_names))
    result.steps, result.seed, result.num_train = steps, seed, int(tr.size)
    return result, head


def save_head(path: str | Path, head: LinearHead, class_names: list[str]) -> None:
    save_container(path, head.arrays(), {"kind": "probe", "backbone": False, "classes": list(class_names)})


def load_head(path: str | Path) -> tuple[LinearHead, list[str]]:
    arrays, meta = load_container(path)
    if meta.get("kind") != "probe":
        raise ValueError(f"{path} is not a probe head file")
    return LinearHead.from_arrays(arrays), list(meta["classes"])


def evaluate_backbone(backbone_path: str | Path, head_path: str | Path, ds: Dataset) -> ProbeResult:
    """Score every sample of ``ds`` with a previously trained head."""
    cfg, params = load_backbone(backbone_path)
    head, names = load_head(head_path)
    if names != list(ds.schema.finding_names):
        raise ValueError(f"probe classes {names} do not match dataset findings {list(ds.schema.finding_names)}")
    labels, mask = probe_labels(ds.records, ds.schema)
    return evaluate_head(head, cls_features(ds.images, params, cfg), labels, mask, names)


def write_result(path: str | Path, result: ProbeResult) -> None:
    atomic_write_bytes(path, result.to_json().encode("utf-8"))
