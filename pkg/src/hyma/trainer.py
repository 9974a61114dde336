"""Training engine shared by the hypernetwork and by direct connector training.

One loop serves both modes. A step draws a data batch of ``batch_size`` rows
and ``model_batch`` pair indices, builds each sampled pair's connector (from
the hypernetwork or from that pair's own parameter vector), computes InfoNCE
on the same data batch for every pair, averages the pair losses and takes
one Adam step.

Randomness is keyed, not stateful: the data permutation for epoch ``e`` is
drawn from ``(seed, DATA, e)``, the pair permutation for sampler cycle ``c``
from ``(seed, PAIRS, c)``, direct-connector init from ``(seed, INIT, k)``.
The step counter is therefore the whole RNG state, which keeps resumed runs
bit-identical to uninterrupted ones.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import connectors
from . import hypernet as hn
from . import numerics as nx
from .connectors import ConnectorLayout, ConnectorParams
from .embeddings import ModelZoo, PairedEmbeddingDataset, embed_batch
from .errors import ConfigurationError, FormatError, TrainingDivergenceError, UnsupportedVersionError
from .objectives import EvalTask, evaluate_connector, info_nce

DATA_STREAM = 101
PAIR_STREAM = 102
INIT_STREAM = 103

MODES = ("hypernet", "direct-pair")


@dataclass
class TrainConfig:
    batch_size: int = 128  # B_d
    model_batch: int = 1  # B_m
    epochs: int = 10
    base_lr: float = 1e-2
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tau: float = 0.07
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only at the end
    mode: str = "hypernet"
    symmetric: bool = False
    clip_norm: float | None = None
    checkpoint_every: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.batch_size < 1 or self.model_batch < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size and model_batch must be >= 1, epochs >= 0")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.to_dict(), **changes})


@dataclass
class RunRecord:
    step: int
    k: int
    loss: float | None
    lr: float | None
    flops_cum: int
    wall_ms: float | None = None
    strategy: str = ""
    seed: int = 0
    metric: float | None = None
    kind: str = "train"  # "train" or "eval"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_records(path, records: Sequence[RunRecord], append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(RunRecord(**json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# sampling and schedules


def pair_sampler(num_pairs: int, model_batch: int, seed: int, step: int) -> list:
    """Pairs for ``step``: a seeded permutation consumed ``model_batch`` at a
    time, reshuffled each cycle; a short tail batch is emitted as-is."""
    if num_pairs < 1 or model_batch < 1:
        raise ConfigurationError("num_pairs and model_batch must be >= 1")
    model_batch = min(model_batch, num_pairs)
    per_cycle = math.ceil(num_pairs / model_batch)
    cycle, pos = divmod(step, per_cycle)
    perm = np.random.default_rng([seed, PAIR_STREAM, cycle]).permutation(num_pairs)
    return [int(k) for k in perm[pos * model_batch:(pos + 1) * model_batch]]


def steps_per_epoch(train_count: int, batch_size: int) -> int:
    return math.ceil(train_count / batch_size)


def data_batch(train: np.ndarray, batch_size: int, seed: int, step: int) -> np.ndarray:
    spe = steps_per_epoch(len(train), batch_size)
    epoch, pos = divmod(step, spe)
    perm = np.random.default_rng([seed, DATA_STREAM, epoch]).permutation(len(train))
    return train[perm[pos * batch_size:(pos + 1) * batch_size]]


def make_schedule(config: TrainConfig, total_steps: int) -> nx.LrSchedule:
    # short runs keep at least half their steps for the cosine decay
    warmup = min(config.warmup_steps, total_steps // 2)
    return nx.LrSchedule(config.base_lr, warmup, total_steps)


def init_direct_theta(layout: ConnectorLayout, seed: int, k: int) -> np.ndarray:
    return connectors.init_params(layout, np.random.default_rng([seed, INIT_STREAM, k]))


# ---------------------------------------------------------------------------
# parameter sources


class DirectSource:
    """One free parameter vector per pair."""

    def __init__(self, layouts: dict, thetas: dict):
        self.layouts = dict(layouts)
        self.thetas = {k: nx.Tensor(t, requires_grad=True) for k, t in thetas.items()}

    def leaves(self) -> dict:
        return {f"theta.{k}": t for k, t in sorted(self.thetas.items())}

    def params(self, k: int, features=None) -> ConnectorParams:
        return ConnectorParams(self.layouts[k], self.thetas[k])

    def extra_flops(self, k: int, batch: int) -> int:
        return 0

    def snapshot(self, k: int, features=None) -> np.ndarray:
        return self.thetas[k].numpy()

    def load_leaves(self, arrays: dict) -> None:
        for name, leaf in self.leaves().items():
            leaf.data = np.array(arrays[name], dtype=leaf.data.dtype)
            leaf.data.setflags(write=False)


class HyperSource:
    """Connector parameters generated by a hypernetwork."""

    def __init__(self, state: hn.HyperNetState, layouts: dict, image_dims: dict | None = None):
        self.state = state
        self.layouts = dict(layouts)
        self.image_dims = image_dims or {}
        for layout in self.layouts.values():
            state.config.check_layout(layout)

    def leaves(self) -> dict:
        return self.state.leaves()

    def params(self, k: int, features=None) -> ConnectorParams:
        return hn.generate(self.state, k, self.layouts[k], features)

    def extra_flops(self, k: int, batch: int) -> int:
        return hn.generation_flops(self.state.config, self.layouts[k].num_layers, batch,
                                   self.image_dims.get(k, 0))

    def snapshot(self, k: int, features=None) -> np.ndarray:
        return self.params(k, features).theta.numpy()

    def load_leaves(self, arrays: dict) -> None:
        self.state.load_leaves(arrays)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"HYCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    config: dict
    step: int
    flops_cum: int
    rng: dict
    adam: dict  # scalars: step_count, leaf_steps
    arrays: dict  # name -> float64 array (leaves, adam moments, best thetas)
    best: dict = field(default_factory=dict)  # k -> {"metric", "step"}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Versioned header + JSON index + named little-endian float64 blobs."""
    index, blobs, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"config": ckpt.config, "step": ckpt.step, "flops_cum": ckpt.flops_cum,
              "rng": ckpt.rng, "adam": ckpt.adam,
              "best": {str(k): v for k, v in ckpt.best.items()}, "leaves": index}
    head = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEAD.size:
        raise FormatError("truncated checkpoint header", offset=len(data))
    magic, version, head_len = _CKPT_HEAD.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} unsupported", offset=4)
    start = _CKPT_HEAD.size
    header = json.loads(data[start:start + head_len])
    base = start + head_len
    arrays = {}
    for entry in header["leaves"]:
        lo = base + entry["offset"]
        if lo + entry["nbytes"] > len(data):
            raise FormatError(f"blob {entry['name']} truncated", offset=len(data))
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=entry["nbytes"] // 8,
                                              offset=lo).reshape(entry["shape"]).copy()
    best = {int(k): v for k, v in header.get("best", {}).items()}
    return Checkpoint(header["config"], header["step"], header["flops_cum"], header["rng"],
                      header["adam"], arrays, best)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class BestSnapshot:
    metric: float
    step: int
    theta: np.ndarray


@dataclass
class TrainResult:
    source: object
    records: list
    flops_total: int
    steps_completed: int
    total_steps: int
    stopped_by_budget: bool = False
    best: dict = field(default_factory=dict)  # k -> BestSnapshot
    final_metrics: dict = field(default_factory=dict)

    @property
    def theta(self) -> np.ndarray:
        """Final parameters of a single-pair direct run."""
        (k,) = self.source.thetas
        return self.source.snapshot(k)

    @property
    def state(self):
        return self.source.state


def pair_step_flops(zoo: ModelZoo, source, layouts: dict, k: int, batch: int) -> int:
    a, b = zoo.pair(k)
    return (connectors.flops_per_train_step(layouts[k], batch, (a.param_count, b.param_count))
            + source.extra_flops(k, batch))


def _eval_features(zoo, dataset, k):
    a, _ = zoo.pair(k)
    return embed_batch(dataset, a, dataset.train)


def run_training(zoo: ModelZoo, dataset: PairedEmbeddingDataset, source, config: TrainConfig, *,
                 pairs: Sequence[int] | None = None,
                 evaluator: Callable | None = None,
                 flops_budget: int | None = None,
                 flops_offset: int = 0,
                 checkpoint_dir=None,
                 resume=None,
                 strategy: str = "",
                 max_steps: int | None = None) -> TrainResult:
    """Train ``source`` on ``pairs`` (default: every pair).

    ``flops_budget`` gates at step granularity: a step that would push the
    cumulative bill past the budget is never started. ``max_steps`` stops the
    loop early without changing the schedule (used for checkpoint tests).
    """
    layouts = source.layouts
    active = list(range(zoo.num_pairs)) if pairs is None else [int(k) for k in pairs]
    train = dataset.train
    if len(train) == 0:
        raise ConfigurationError("empty training split")
    if config.batch_size > len(train):
        raise ConfigurationError(f"batch_size {config.batch_size} > {len(train)} training rows")
    if config.model_batch > len(active):
        raise ConfigurationError(f"model_batch {config.model_batch} > {len(active)} pairs")
    uses_features = isinstance(source, HyperSource) and source.state.config.conditioning != "codebook"

    total = config.epochs * steps_per_epoch(len(train), config.batch_size)
    schedule = make_schedule(config, total)
    opt = nx.Adam(source.leaves(), lr=config.base_lr or 1.0, betas=(config.beta1, config.beta2),
                  eps=config.eps, clip_norm=config.clip_norm)

    start, flops_cum, best = 0, int(flops_offset), {}
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        start, flops_cum = ckpt.step, ckpt.flops_cum
        source.load_leaves({n: ckpt.arrays[n] for n in source.leaves()})
        opt.state.step_count = ckpt.adam["step_count"]
        opt.state.leaf_steps = dict(ckpt.adam["leaf_steps"])
        for name in source.leaves():
            if f"adam.m.{name}" in ckpt.arrays:
                opt.state.first_moment[name] = ckpt.arrays[f"adam.m.{name}"]
                opt.state.second_moment[name] = ckpt.arrays[f"adam.v.{name}"]
        for k, info in ckpt.best.items():
            best[k] = BestSnapshot(info["metric"], info["step"], ckpt.arrays[f"best.{k}"])

    records: list = []

    def evaluate(step_done: int) -> None:
        if evaluator is None:
            return
        for k in active:
            feats = _eval_features(zoo, dataset, k) if uses_features else None
            theta = source.snapshot(k, feats)
            metric = float(evaluator(k, theta))
            records.append(RunRecord(step_done, k, None, None, flops_cum, None, strategy,
                                     config.seed, metric, "eval"))
            if k not in best or metric > best[k].metric:
                best[k] = BestSnapshot(metric, step_done, theta)

    def checkpoint(step_done: int) -> None:
        arrays = {n: t.data for n, t in source.leaves().items()}
        for n in source.leaves():
            if n in opt.state.first_moment:
                arrays[f"adam.m.{n}"] = opt.state.first_moment[n]
                arrays[f"adam.v.{n}"] = opt.state.second_moment[n]
        for k, snap in best.items():
            arrays[f"best.{k}"] = snap.theta
        ckpt = Checkpoint(config.to_dict(), step_done, flops_cum,
                          {"seed": config.seed, "next_step": step_done},
                          {"step_count": opt.state.step_count, "leaf_steps": opt.state.leaf_steps},
                          arrays, {k: {"metric": s.metric, "step": s.step} for k, s in best.items()})
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(Path(checkpoint_dir) / f"step_{step_done:06d}.ckpt", ckpt)

    stopped = False
    last_eval = None
    step = start
    end = total if max_steps is None else min(total, max_steps)
    while step < end:
        batch = data_batch(train, config.batch_size, config.seed, step)
        chosen = [active[i] for i in pair_sampler(len(active), config.model_batch, config.seed, step)]
        b = len(batch)
        step_flops = [pair_step_flops(zoo, source, layouts, k, b) for k in chosen]
        if flops_budget is not None and flops_cum + sum(step_flops) > flops_budget:
            stopped = True
            break
        lr = schedule(step)
        t0 = time.perf_counter()
        terms = []
        for k in chosen:
            a, bb = zoo.pair(k)
            xa = embed_batch(dataset, a, batch)
            xb = embed_batch(dataset, bb, batch)
            params = source.params(k, xa if uses_features else None)
            loss_k = info_nce(connectors.forward(params, xb), xa, config.tau, config.symmetric)
            if not np.isfinite(loss_k.item()):
                raise TrainingDivergenceError("non-finite loss", step=step, pair=k, lr=lr,
                                              loss=loss_k.item())
            terms.append(loss_k)
        loss = terms[0]
        for t in terms[1:]:
            loss = nx.add(loss, t)
        loss = nx.scale(loss, 1.0 / len(terms))
        opt.zero_grad()
        loss.backward()
        try:
            opt.step(lr)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError("non-finite gradient", step=step, pairs=chosen, lr=lr,
                                          **exc.report) from None
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else None
        for k, term, f in zip(chosen, terms, step_flops):
            flops_cum += f
            records.append(RunRecord(step, k, term.item(), lr, flops_cum, wall, strategy, config.seed))
        step += 1
        if config.eval_every and step % config.eval_every == 0:
            evaluate(step)
            last_eval = step
        if checkpoint_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoint(step)

    if last_eval != step:
        evaluate(step)
    final = {r.k: r.metric for r in records if r.kind == "eval" and r.step == step}
    return TrainResult(source, records, flops_cum, step, total, stopped, best, final)


def step_losses(zoo: ModelZoo, dataset: PairedEmbeddingDataset, source, config: TrainConfig,
                step: int, pairs: Sequence[int] | None = None) -> dict:
    """Per-pair losses the loop would compute at ``step`` from the current state."""
    active = list(range(zoo.num_pairs)) if pairs is None else list(pairs)
    uses_features = isinstance(source, HyperSource) and source.state.config.conditioning != "codebook"
    batch = data_batch(dataset.train, config.batch_size, config.seed, step)
    out = {}
    for i in pair_sampler(len(active), config.model_batch, config.seed, step):
        k = active[i]
        a, b = zoo.pair(k)
        xa = embed_batch(dataset, a, batch)
        params = source.params(k, xa if uses_features else None)
        out[k] = info_nce(connectors.forward(params, embed_batch(dataset, b, batch)), xa,
                          config.tau, config.symmetric).item()
    return out


# ---------------------------------------------------------------------------
# public entry points


def layouts_for(zoo: ModelZoo, kind: str, hidden: int = connectors.HIDDEN) -> dict:
    """Text (B) -> image (A) connector layout for every pair."""
    out = {}
    for k in range(zoo.num_pairs):
        a, b = zoo.pair(k)
        out[k] = connectors.make_layout(kind, b.dim, a.dim, hidden)
    return out


def make_evaluator(zoo: ModelZoo, dataset: PairedEmbeddingDataset, layouts: dict, task: EvalTask):
    def evaluate(k: int, theta: np.ndarray) -> float:
        a, b = zoo.pair(k)
        return evaluate_connector(task, dataset.bank(a.id), dataset.bank(b.id), layouts[k], theta)

    return evaluate


def train_direct(pair, zoo: ModelZoo, dataset: PairedEmbeddingDataset, layout: ConnectorLayout,
                 config: TrainConfig, *, init_theta: np.ndarray | None = None, **kwargs) -> TrainResult:
    """Standard single-connector training on one pair (``pair`` is ``k`` or ``(n, m)``)."""
    k = zoo.pair_index(*pair) if isinstance(pair, tuple) else int(pair)
    zoo.decode(k)
    theta = init_direct_theta(layout, config.seed, k) if init_theta is None else init_theta
    source = DirectSource({k: layout}, {k: theta})
    cfg = config.replace(model_batch=1, mode="direct-pair")
    return run_training(zoo, dataset, source, cfg, pairs=[k], **kwargs)


def train_hyma(zoo: ModelZoo, dataset: PairedEmbeddingDataset, state: hn.HyperNetState | None,
               config: TrainConfig, layouts: dict, **kwargs) -> TrainResult:
    """Joint training over all pairs.

    In ``direct-pair`` mode the hypernetwork is replaced by one free parameter
    vector per pair (``state`` is ignored), which reduces to ``train_direct``
    when there is a single pair.
    """
    if config.mode == "direct-pair":
        source = DirectSource(layouts, {k: init_direct_theta(layouts[k], config.seed, k)
                                        for k in range(zoo.num_pairs)})
    else:
        if state is None:
            raise ConfigurationError("hypernet mode needs a hypernetwork state")
        image_dims = {k: zoo.pair(k)[0].dim for k in range(zoo.num_pairs)}
        source = HyperSource(state, layouts, image_dims)
    return run_training(zoo, dataset, source, config, **kwargs)


def build_hypernet(zoo: ModelZoo, layouts: dict, *, cond_dim: int = 32,
                   generator_hidden: Sequence[int] = (64,), conditioning: str = "codebook",
                   seed: int = 0) -> hn.HyperNetState:
    config = hn.HyperNetConfig.for_layouts(
        [layouts[k] for k in range(zoo.num_pairs)], cond_dim, generator_hidden, conditioning,
        num_text=zoo.M, image_dims=[e.dim for e in zoo.encoders_a])
    return hn.init(config, seed)


def predicted_flops(zoo: ModelZoo, layouts: dict, config: TrainConfig, train_count: int, *,
                    hyper_config: hn.HyperNetConfig | None = None,
                    pairs: Sequence[int] | None = None) -> int:
    """Closed-form bill of a full run, step by step, without training."""
    active = list(range(zoo.num_pairs)) if pairs is None else list(pairs)
    spe = steps_per_epoch(train_count, config.batch_size)
    total = 0
    for step in range(config.epochs * spe):
        pos = step % spe
        b = min(config.batch_size, train_count - pos * config.batch_size)
        for i in pair_sampler(len(active), config.model_batch, config.seed, step):
            k = active[i]
            a, bb = zoo.pair(k)
            total += connectors.flops_per_train_step(layouts[k], b, (a.param_count, bb.param_count))
            if hyper_config is not None:
                total += hn.generation_flops(hyper_config, layouts[k].num_layers, b, a.dim)
    return total
