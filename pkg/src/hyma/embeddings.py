"""Frozen encoders, the model zoo, synthetic planted zoos and embedding banks.

Bank file layout (little-endian)::

    b"EMB1" | u32 count | u32 dim | count * dim float32, row-major

Banks are float32 on disk and promoted to float64 in memory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import (
    ConfigurationError,
    FormatError,
    RangeError,
    SpecError,
    UnsupportedVersionError,
)

MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SyntheticEncoderSpec:
    latent_dim: int
    dim: int
    quality: float
    seed: int
    nonlinearity: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.quality <= 1.0:
            raise SpecError(f"quality {self.quality} outside [0, 1]")
        if self.nonlinearity not in ("none", "tanh"):
            raise SpecError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.latent_dim > self.dim:
            raise SpecError(
                f"latent_dim {self.latent_dim} > dim {self.dim}: projection would lose rank")


@dataclass
class EncoderHandle:
    id: str
    modality: str  # "A" (image side) or "B" (text side)
    dim: int
    param_count: int = 0
    unimodal_score: float | None = None
    source: str | SyntheticEncoderSpec | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in ("A", "B"):
            raise ConfigurationError(f"encoder {self.id}: modality must be 'A' or 'B'")
        if self.dim <= 0:
            raise ConfigurationError(f"encoder {self.id}: dim must be positive")
        if self.param_count < 0:
            raise ConfigurationError(f"encoder {self.id}: negative param_count")

    def to_dict(self) -> dict:
        out = {"id": self.id, "modality": self.modality, "dim": self.dim,
               "param_count": self.param_count, "unimodal_score": self.unimodal_score,
               "metadata": self.metadata}
        if isinstance(self.source, SyntheticEncoderSpec):
            out["synthetic"] = asdict(self.source)
        return out


class ModelZoo:
    """N modality-A encoders, M modality-B encoders, pairs indexed ``k = n*M + m``."""

    def __init__(self, encoders_a: Sequence[EncoderHandle], encoders_b: Sequence[EncoderHandle]):
        self.encoders_a = list(encoders_a)
        self.encoders_b = list(encoders_b)
        if not self.encoders_a or not self.encoders_b:
            raise ConfigurationError("a zoo needs at least one encoder per modality")
        ids = [e.id for e in self.encoders_a + self.encoders_b]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ConfigurationError(f"duplicate encoder ids: {dupes}")
        for e in self.encoders_a:
            if e.modality != "A":
                raise ConfigurationError(f"{e.id} listed as modality A but tagged {e.modality}")
        for e in self.encoders_b:
            if e.modality != "B":
                raise ConfigurationError(f"{e.id} listed as modality B but tagged {e.modality}")

    @property
    def N(self) -> int:
        return len(self.encoders_a)

    @property
    def M(self) -> int:
        return len(self.encoders_b)

    @property
    def num_pairs(self) -> int:
        return self.N * self.M

    def pair_index(self, n: int, m: int) -> int:
        if not (0 <= n < self.N and 0 <= m < self.M):
            raise RangeError(f"pair ({n}, {m}) outside {self.N}x{self.M} zoo")
        return n * self.M + m

    def decode(self, k: int) -> tuple:
        if not 0 <= k < self.num_pairs:
            raise RangeError(f"pair index {k} outside [0, {self.num_pairs})")
        return divmod(k, self.M)

    def pair(self, k: int) -> tuple:
        n, m = self.decode(k)
        return self.encoders_a[n], self.encoders_b[m]

    def pair_name(self, k: int) -> str:
        a, b = self.pair(k)
        return f"{a.id}+{b.id}"

    def encoder(self, encoder_id: str) -> EncoderHandle:
        for e in self.encoders_a + self.encoders_b:
            if e.id == encoder_id:
                return e
        raise ConfigurationError(f"unknown encoder id {encoder_id!r}")

    def to_dict(self) -> dict:
        return {"encoders_a": [e.to_dict() for e in self.encoders_a],
                "encoders_b": [e.to_dict() for e in self.encoders_b]}


def split_indices(count: int, val_fraction: float, seed: int) -> tuple:
    """Seeded train/val split; both index arrays sorted."""
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigurationError("val_fraction must lie in [0, 1)")
    perm = np.random.default_rng([seed, 7]).permutation(count)
    n_val = int(round(val_fraction * count))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


class PairedEmbeddingDataset:
    """Index-aligned banks (row i is the same underlying pair in every bank)."""

    def __init__(self, banks: dict, train: np.ndarray, val: np.ndarray):
        counts = {name: b.shape[0] for name, b in banks.items()}
        if len(set(counts.values())) > 1:
            raise ConfigurationError(f"banks disagree on sample count: {counts}")
        self.count = next(iter(counts.values())) if counts else 0
        self.banks = {}
        for name, b in banks.items():
            arr = np.asarray(b, dtype=np.float64)
            arr.setflags(write=False)
            self.banks[name] = arr
        self.train = np.asarray(train, dtype=np.int64)
        self.val = np.asarray(val, dtype=np.int64)
        if np.intersect1d(self.train, self.val).size:
            raise ConfigurationError("train and val splits overlap")
        for part in (self.train, self.val):
            if part.size and (part.min() < 0 or part.max() >= self.count):
                raise RangeError("split index outside dataset")

    def bank(self, encoder_id: str) -> np.ndarray:
        try:
            return self.banks[encoder_id]
        except KeyError:
            raise ConfigurationError(f"no bank for encoder {encoder_id!r}") from None

    def with_train(self, train: np.ndarray) -> "PairedEmbeddingDataset":
        """Same banks and val split, different training indices."""
        return PairedEmbeddingDataset(self.banks, train, self.val)


def embed_batch(dataset: PairedEmbeddingDataset, encoder: EncoderHandle | str,
                indices) -> nx.Tensor:
    """Rows of a frozen encoder's bank; never requires grad."""
    encoder_id = encoder if isinstance(encoder, str) else encoder.id
    bank = dataset.bank(encoder_id)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bank.shape[0]):
        raise RangeError(f"index out of range for {bank.shape[0]}-row bank {encoder_id}")
    return nx.Tensor(bank[idx], requires_grad=False)


# ---------------------------------------------------------------------------
# synthetic zoos


def synthesize_bank(spec: SyntheticEncoderSpec, latents: np.ndarray,
                    noise_rng: np.random.Generator) -> np.ndarray:
    """``nonlinearity(P z + (1 - q) * eps)`` with ``P`` seeded by ``spec.seed``."""
    if latents.shape[1] != spec.latent_dim:
        raise SpecError(f"latent width {latents.shape[1]} != spec latent_dim {spec.latent_dim}")
    proj = np.random.default_rng([spec.seed, 1]).standard_normal((spec.dim, spec.latent_dim))
    proj /= np.sqrt(spec.latent_dim)
    x = latents @ proj.T
    if spec.quality < 1.0:
        x = x + (1.0 - spec.quality) * noise_rng.standard_normal(x.shape)
    if spec.nonlinearity == "tanh":
        x = np.tanh(x)
    return x.astype(np.float32)


def generate_synthetic_zoo(encoders_a: Sequence[EncoderHandle], encoders_b: Sequence[EncoderHandle],
                           sample_count: int, seed: int, val_fraction: float = 0.125):
    """Materialise banks for encoders whose ``source`` is a synthetic spec.

    All encoders see the same seeded latents, so banks are index-aligned.
    Returns ``(zoo, dataset)``.
    """
    if sample_count < 4:
        raise SpecError("sample_count must be >= 4")
    zoo = ModelZoo(encoders_a, encoders_b)
    specs = []
    for e in zoo.encoders_a + zoo.encoders_b:
        if not isinstance(e.source, SyntheticEncoderSpec):
            raise SpecError(f"encoder {e.id} has no synthetic spec")
        if e.source.dim != e.dim:
            raise SpecError(f"encoder {e.id}: dim {e.dim} != spec dim {e.source.dim}")
        specs.append(e.source)
    latent_dims = {s.latent_dim for s in specs}
    if len(latent_dims) != 1:
        raise SpecError(f"encoders disagree on latent_dim: {sorted(latent_dims)}")
    latents = np.random.default_rng([seed, 0]).standard_normal((sample_count, latent_dims.pop()))
    banks = {}
    for i, (e, spec) in enumerate(zip(zoo.encoders_a + zoo.encoders_b, specs)):
        banks[e.id] = synthesize_bank(spec, latents, np.random.default_rng([seed, 2, i]))
    train, val = split_indices(sample_count, val_fraction, seed)
    return zoo, PairedEmbeddingDataset(banks, train, val)


def planted_zoo(qualities_a: Sequence[float], qualities_b: Sequence[float], *,
                dims_a: Sequence[int] | None = None, dims_b: Sequence[int] | None = None,
                latent_dim: int = 16, sample_count: int = 4096, seed: int = 0,
                val_fraction: float = 0.125, nonlinearity: str = "none"):
    """Convenience builder: one synthetic encoder per quality value."""
    dims_a = list(dims_a or [latent_dim] * len(qualities_a))
    dims_b = list(dims_b or [latent_dim] * len(qualities_b))

    def handles(prefix, modality, qualities, dims, offset):
        out = []
        for i, (q, d) in enumerate(zip(qualities, dims)):
            spec = SyntheticEncoderSpec(latent_dim, d, float(q), seed * 1000 + offset + i, nonlinearity)
            out.append(EncoderHandle(f"{prefix}{i}", modality, d, param_count=0,
                                     unimodal_score=float(q), source=spec))
        return out

    return generate_synthetic_zoo(handles("img", "A", qualities_a, dims_a, 0),
                                  handles("txt", "B", qualities_b, dims_b, 500),
                                  sample_count, seed, val_fraction)


def planted_scores(zoo: ModelZoo) -> np.ndarray:
    """Planted pair quality: minus the summed noise variance of the two encoders."""
    out = np.empty(zoo.num_pairs)
    for k in range(zoo.num_pairs):
        a, b = zoo.pair(k)
        if not (isinstance(a.source, SyntheticEncoderSpec) and isinstance(b.source, SyntheticEncoderSpec)):
            raise SpecError("planted scores need synthetic encoders")
        out[k] = -((1 - a.source.quality) ** 2 + (1 - b.source.quality) ** 2)
    return out


# ---------------------------------------------------------------------------
# bank files and manifests


def write_bank(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"bank must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise FormatError("bank contains non-finite values")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + payload)


def read_bank(path) -> np.ndarray:
    return parse_bank(Path(path).read_bytes())


def parse_bank(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise FormatError("file too short for magic", offset=len(data))
    magic = data[:4]
    if magic != MAGIC:
        if magic[:3] == b"EMB":
            raise UnsupportedVersionError(f"unsupported bank version {magic!r}", offset=0)
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", offset=len(data))
    _, count, dim = _HEADER.unpack_from(data)
    expected = count * dim * 4
    payload = len(data) - _HEADER.size
    if payload != expected:
        raise FormatError(
            f"payload is {payload} bytes but header count={count}, dim={dim} needs {expected}",
            offset=_HEADER.size + min(payload, expected))
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, dim).astype(np.float32)


def write_manifest(path, zoo: ModelZoo, bank_paths: dict, *, split_seed: int,
                   val_fraction: float, count: int, extra: dict | None = None) -> None:
    path = Path(path)
    entries = []
    for e in zoo.encoders_a + zoo.encoders_b:
        d = e.to_dict()
        bank = Path(bank_paths[e.id])
        try:
            d["bank"] = str(bank.relative_to(path.parent))
        except ValueError:
            d["bank"] = str(bank)
        entries.append(d)
    doc = {"schema_version": MANIFEST_VERSION, "count": count, "split_seed": split_seed,
           "val_fraction": val_fraction, "encoders": entries}
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    """Read a manifest and every bank it lists; returns ``(zoo, dataset, doc)``."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema_version") != MANIFEST_VERSION:
        raise ConfigurationError(f"manifest schema_version {doc.get('schema_version')} unsupported")
    enc_a, enc_b, banks = [], [], {}
    for d in doc["encoders"]:
        spec = d.get("synthetic")
        handle = EncoderHandle(d["id"], d["modality"], int(d["dim"]), int(d.get("param_count", 0)),
                               d.get("unimodal_score"),
                               SyntheticEncoderSpec(**spec) if spec else str(d["bank"]),
                               d.get("metadata") or {})
        bank_path = Path(d["bank"])
        if not bank_path.is_absolute():
            bank_path = path.parent / bank_path
        if not bank_path.exists():
            raise ConfigurationError(f"bank file for {handle.id} not found: {bank_path}")
        bank = read_bank(bank_path)
        if bank.shape[1] != handle.dim:
            raise ConfigurationError(f"{handle.id}: manifest dim {handle.dim} != bank dim {bank.shape[1]}")
        banks[handle.id] = bank
        (enc_a if handle.modality == "A" else enc_b).append(handle)
    zoo = ModelZoo(enc_a, enc_b)
    count = next(iter(banks.values())).shape[0]
    if count != doc.get("count", count):
        raise ConfigurationError("manifest count disagrees with banks")
    train, val = split_indices(count, float(doc["val_fraction"]), int(doc["split_seed"]))
    return zoo, PairedEmbeddingDataset(banks, train, val), doc
