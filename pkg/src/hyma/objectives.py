"""InfoNCE stitching loss and frozen-model scorers.

Scorers break ties by lower candidate index: the rank of the gold candidate
is the number of candidates scoring strictly higher plus the number scoring
equal with a smaller index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .connectors import ConnectorLayout, forward_numpy
from .errors import ArgumentError, ConfigurationError, DegenerateInputError, DimensionError

DEFAULT_TAU = 0.07


@dataclass
class ContrastiveBatch:
    stitched: nx.Tensor  # connector(text embeddings), b x D_A
    anchors: nx.Tensor  # image embeddings, b x D_A
    tau: float = DEFAULT_TAU


def info_nce(stitched, anchors=None, tau: float = DEFAULT_TAU, symmetric: bool = False) -> nx.Tensor:
    """Mean over rows of ``-log softmax(cos(stitched_i, anchors_.) / tau)[i]``.

    Accepts a ``ContrastiveBatch`` or the two tensors. ``symmetric`` averages
    the row-wise and column-wise losses.
    """
    if isinstance(stitched, ContrastiveBatch):
        stitched, anchors, tau = stitched.stitched, stitched.anchors, stitched.tau
    if not tau > 0:
        raise ArgumentError(f"temperature must be positive, got {tau}")
    if stitched.shape != anchors.shape or stitched.data.ndim != 2:
        raise DimensionError(f"stitched {stitched.shape} and anchors {anchors.shape} must match")
    if stitched.shape[0] < 1:
        raise ArgumentError("empty batch")
    s = nx.l2_normalize_rows(stitched)
    a = nx.l2_normalize_rows(anchors)
    logits = nx.scale(nx.matmul(s, nx.transpose(a)), 1.0 / tau)
    positives = nx.diag(logits)
    loss = nx.mean(nx.logsumexp(logits, axis=1) - positives)
    if symmetric:
        col = nx.mean(nx.logsumexp(logits, axis=0) - positives)
        loss = nx.scale(loss + col, 0.5)
    return loss


def cosine_scores(items: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """items x candidates cosine-similarity matrix."""
    items = np.asarray(items, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if items.shape[1] != candidates.shape[1]:
        raise DimensionError(f"width mismatch {items.shape} vs {candidates.shape}")
    ni = np.linalg.norm(items, axis=1, keepdims=True)
    nc = np.linalg.norm(candidates, axis=1, keepdims=True)
    if np.any(ni == 0) or np.any(nc == 0):
        raise DegenerateInputError("zero-norm embedding row")
    return (items / ni) @ (candidates / nc).T


def gold_ranks(scores: np.ndarray, gold) -> np.ndarray:
    """0-based rank of each item's gold candidate under the tie rule."""
    scores = np.asarray(scores)
    gold = np.asarray(gold, dtype=np.int64)
    if gold.size and (gold.min() < 0 or gold.max() >= scores.shape[1]):
        raise ArgumentError("gold index outside candidate range")
    g = scores[np.arange(len(gold)), gold][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    return ((scores > g) | ((scores == g) & (cols < gold[:, None]))).sum(axis=1)


def recall_at_k(scores, gold, k: int) -> float:
    scores = np.asarray(scores)
    if not 1 <= k <= scores.shape[1]:
        raise ArgumentError(f"k={k} outside [1, {scores.shape[1]}]")
    return float(np.mean(gold_ranks(scores, gold) < k))


def classify_by_prompt(stitched_text_bank, image_bank, gold, k: int = 1) -> float:
    """Top-k accuracy of matching each image to the stitched class prompts."""
    return recall_at_k(cosine_scores(image_bank, stitched_text_bank), gold, k)


def vqa_qip_score(prompt_banks: Sequence[np.ndarray], image_bank, gold, k: int = 1) -> float:
    """Per-item candidate sets of stitched ``QUESTION/ANSWER`` prompt embeddings."""
    image_bank = np.asarray(image_bank, dtype=np.float64)
    if len(prompt_banks) != len(image_bank):
        raise DimensionError("one candidate set per image is required")
    hits = []
    for img, prompts, g in zip(image_bank, prompt_banks, np.asarray(gold)):
        prompts = np.asarray(prompts)
        if prompts.shape[0] < 2:
            raise ArgumentError("VQA items need at least two candidate prompts")
        scores = cosine_scores(img[None, :], prompts)
        hits.append(gold_ranks(scores, [g])[0] < k)
    return float(np.mean(hits))


# ---------------------------------------------------------------------------
# evaluation tasks


@dataclass
class EvalTask:
    """Candidate sets reference rows of the modality-B bank, items rows of
    the modality-A bank.

    ``retrieval`` and ``classification`` share one candidate list;
    ``vqa-qip`` has one list per item.
    """

    kind: str
    items: list
    candidates: list
    gold: list
    k: int = 1
    name: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("retrieval", "classification", "vqa-qip"):
            raise ConfigurationError(f"unknown eval task kind {self.kind!r}")
        if len(self.gold) != len(self.items):
            raise ConfigurationError("one gold index per item is required")
        if self.kind == "vqa-qip":
            if len(self.candidates) != len(self.items):
                raise ConfigurationError("vqa-qip needs one candidate list per item")
            for cands, g in zip(self.candidates, self.gold):
                if not 0 <= g < len(cands):
                    raise ConfigurationError("gold index outside its candidate list")
        else:
            if any(not 0 <= g < len(self.candidates) for g in self.gold):
                raise ConfigurationError("gold index outside candidate list")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "k": self.k, "items": list(map(int, self.items)),
                "candidates": _plain(self.candidates), "gold": list(map(int, self.gold)),
                "metadata": self.metadata}


def _plain(x):
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_plain(v) for v in x]
    return int(x)


def retrieval_task(indices, k: int = 5, name: str = "val-retrieval") -> EvalTask:
    """Image-to-text retrieval where row i's own caption is the gold candidate."""
    idx = [int(i) for i in indices]
    return EvalTask("retrieval", idx, idx, list(range(len(idx))), k=k, name=name)


def load_eval_task(path) -> EvalTask:
    doc = json.loads(Path(path).read_text())
    return EvalTask(doc["kind"], doc["items"], doc["candidates"], doc["gold"], int(doc.get("k", 1)),
                    doc.get("name", Path(path).stem), doc.get("metadata") or {})


def write_eval_task(path, task: EvalTask) -> None:
    Path(path).write_text(json.dumps(task.to_dict(), sort_keys=True) + "\n")


def evaluate_connector(task: EvalTask, image_bank: np.ndarray, text_bank: np.ndarray,
                       layout: ConnectorLayout, theta: np.ndarray) -> float:
    """Stitch the candidate texts through the connector and score the task."""
    images = image_bank[np.asarray(task.items, dtype=np.int64)]
    if task.kind == "vqa-qip":
        prompt_banks = [forward_numpy(layout, theta, text_bank[np.asarray(c, dtype=np.int64)])
                        for c in task.candidates]
        return vqa_qip_score(prompt_banks, images, task.gold, task.k)
    stitched = forward_numpy(layout, theta, text_bank[np.asarray(task.candidates, dtype=np.int64)])
    return recall_at_k(cosine_scores(images, stitched), task.gold, task.k)
