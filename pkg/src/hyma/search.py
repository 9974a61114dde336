"""Pair-search strategies.

Every strategy returns a ``StrategyOutcome``: a ranking of the pairs it
evaluated, the winning pair with its connector parameters, and a FLOPs bill
made of per-stage entries. Training cost only; evaluation is not billed.
"""
from __future__ import annotations

import json
import os
import re
import statistics
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import trainer as tr
from .embeddings import ModelZoo, PairedEmbeddingDataset
from .errors import (AdvisorParseError, AdvisorUnavailableError, ConfigurationError,
                     TrainingDivergenceError)
from .metrics import order_by_metric
from .objectives import EvalTask

RANDOM_STREAM = 201
CGS_STREAM = 202
AUTOPAIR_STREAM = 203

STRATEGIES = ("hyma", "grid", "random", "unit1", "ask", "autopair", "cgs", "bestguess")


@dataclass
class StrategyOutcome:
    strategy: str
    ranked: list  # [(k, metric or None)], best first; failed pairs last
    winner: int | None
    winner_metric: float | None
    flops_total: int
    stages: list = field(default_factory=list)  # [{"name", "pairs", "flops"}]
    failed: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    winner_theta: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pairs = [k for k, _ in self.ranked]
        if len(set(pairs)) != len(pairs):
            raise ConfigurationError("a pair appears twice in the ranking")
        if self.stages and sum(s["flops"] for s in self.stages) != self.flops_total:
            raise ConfigurationError("stage FLOPs do not add up to the total")

    def metrics(self) -> dict:
        return {k: m for k, m in self.ranked if m is not None}

    def to_dict(self) -> dict:
        return {"strategy": self.strategy,
                "ranked": [[int(k), None if m is None else float(m)] for k, m in self.ranked],
                "winner": self.winner, "winner_metric": self.winner_metric,
                "flops_total": int(self.flops_total), "stages": self.stages,
                "failed": self.failed, "flags": self.flags, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyOutcome":
        return cls(d["strategy"], [(int(k), m) for k, m in d["ranked"]], d["winner"],
                   d["winner_metric"], int(d["flops_total"]), d.get("stages", []),
                   d.get("failed", []), d.get("flags", []), d.get("extra", {}))

    @classmethod
    def load(cls, path) -> "StrategyOutcome":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _rank(metrics: dict, failed: Sequence[int] = ()) -> list:
    ranked = [(k, metrics[k]) for k in order_by_metric(metrics)]
    return ranked + [(k, None) for k in sorted(failed)]


@dataclass
class SearchContext:
    """Everything a strategy needs besides its own knobs."""

    zoo: ModelZoo
    dataset: PairedEmbeddingDataset
    layouts: dict  # k -> ConnectorLayout
    config: tr.TrainConfig
    task: EvalTask
    records: list = field(default_factory=list)

    def evaluator(self, dataset: PairedEmbeddingDataset | None = None):
        return tr.make_evaluator(self.zoo, dataset or self.dataset, self.layouts, self.task)


def _train_pair(ctx: SearchContext, k: int, strategy: str, config: tr.TrainConfig | None = None,
                dataset: PairedEmbeddingDataset | None = None, **kwargs) -> tr.TrainResult:
    dataset = dataset or ctx.dataset
    result = tr.train_direct(k, ctx.zoo, dataset, ctx.layouts[k], config or ctx.config,
                             evaluator=ctx.evaluator(dataset), strategy=strategy, **kwargs)
    ctx.records.extend(result.records)
    return result


# ---------------------------------------------------------------------------
# grid search and its variants


def run_grid_search(ctx: SearchContext, *, strategy: str = "grid",
                    dataset: PairedEmbeddingDataset | None = None,
                    config: tr.TrainConfig | None = None) -> StrategyOutcome:
    """Train every pair independently; rank by each pair's best checkpoint."""
    metrics, thetas, bills, failed, stages = {}, {}, {}, [], []
    for k in range(ctx.zoo.num_pairs):
        try:
            res = _train_pair(ctx, k, strategy, config, dataset)
        except TrainingDivergenceError as exc:
            failed.append(k)
            stages.append({"name": f"train:{ctx.zoo.pair_name(k)}", "pairs": [k], "flops": 0,
                           "error": str(exc)})
            continue
        best = res.best[k]
        metrics[k], thetas[k], bills[k] = best.metric, best.theta, res.flops_total
        stages.append({"name": f"train:{ctx.zoo.pair_name(k)}", "pairs": [k], "flops": res.flops_total})
    if not metrics:
        raise TrainingDivergenceError("every pair diverged", strategy=strategy)
    ranked = _rank(metrics, failed)
    winner = ranked[0][0]
    return StrategyOutcome(strategy, ranked, winner, metrics[winner],
                           sum(s["flops"] for s in stages), stages, failed,
                           ["diverged"] if failed else [],
                           {"pair_flops": {str(k): v for k, v in bills.items()}},
                           thetas[winner])


def cgs_subset(train: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Sorted seeded subset of ``round(fraction * len(train))`` training rows."""
    if not 0 < fraction <= 1:
        raise ConfigurationError("data fraction must lie in (0, 1]")
    size = max(1, int(round(fraction * len(train))))
    if size == len(train):
        return np.asarray(train)
    rng = np.random.default_rng([seed, CGS_STREAM])
    return np.sort(rng.choice(np.asarray(train), size=size, replace=False))


def run_cgs(ctx: SearchContext, data_fraction: float = 1 / 3) -> StrategyOutcome:
    """Grid search restricted to a seeded fraction of the training data."""
    subset = cgs_subset(ctx.dataset.train, data_fraction, ctx.config.seed)
    config = ctx.config
    flags = []
    if config.batch_size > len(subset):
        config = config.replace(batch_size=len(subset))
        flags.append("batch_size_clamped")
    out = run_grid_search(ctx, strategy="cgs", dataset=ctx.dataset.with_train(subset), config=config)
    out.flags += flags
    out.extra["data_fraction"] = data_fraction
    out.extra["train_count"] = int(len(subset))
    return out


def best_guess(grid: StrategyOutcome) -> StrategyOutcome:
    """Cost of training only the grid winner, as if it had been known upfront."""
    bill = int(grid.extra["pair_flops"][str(grid.winner)])
    return StrategyOutcome("bestguess", [(grid.winner, grid.winner_metric)], grid.winner,
                           grid.winner_metric, bill,
                           [{"name": "from-grid", "pairs": [grid.winner], "flops": bill}],
                           extra={"source": grid.strategy}, winner_theta=grid.winner_theta)


# ---------------------------------------------------------------------------
# HYMA


def run_hyma_search(ctx: SearchContext, state=None, *, cond_dim: int = 32,
                    generator_hidden: Sequence[int] = (64,), conditioning: str = "codebook",
                    checkpoint_dir=None) -> StrategyOutcome:
    """One joint hypernetwork run, then rank pairs by their generated connectors."""
    if state is None:
        state = tr.build_hypernet(ctx.zoo, ctx.layouts, cond_dim=cond_dim,
                                  generator_hidden=generator_hidden, conditioning=conditioning,
                                  seed=ctx.config.seed)
    res = tr.train_hyma(ctx.zoo, ctx.dataset, state, ctx.config.replace(mode="hypernet"),
                        ctx.layouts, evaluator=ctx.evaluator(), strategy="hyma",
                        checkpoint_dir=checkpoint_dir)
    ctx.records.extend(res.records)
    metrics = dict(res.final_metrics)
    ranked = _rank(metrics)
    winner = ranked[0][0]
    feats = None
    if state.config.conditioning != "codebook":
        feats = tr._eval_features(ctx.zoo, ctx.dataset, winner)
    theta = res.source.snapshot(winner, feats)
    return StrategyOutcome("hyma", ranked, winner, metrics[winner], res.flops_total,
                           [{"name": "train:hypernet", "pairs": list(range(ctx.zoo.num_pairs)),
                             "flops": res.flops_total}],
                           extra={"model_batch": ctx.config.model_batch,
                                  "steps": res.steps_completed},
                           winner_theta=theta)


# ---------------------------------------------------------------------------
# single-pair baselines


def _single(ctx: SearchContext, strategy: str, k: int, extra: dict | None = None) -> StrategyOutcome:
    res = _train_pair(ctx, k, strategy)
    best = res.best[k]
    return StrategyOutcome(strategy, [(k, best.metric)], k, best.metric, res.flops_total,
                           [{"name": f"train:{ctx.zoo.pair_name(k)}", "pairs": [k],
                             "flops": res.flops_total}], extra=extra or {}, winner_theta=best.theta)


def random_trial_pairs(num_pairs: int, trials: int, seed: int) -> list:
    rng = np.random.default_rng([seed, RANDOM_STREAM])
    return [int(k) for k in rng.integers(0, num_pairs, size=trials)]


def run_random(ctx: SearchContext, trials: int = 5) -> StrategyOutcome:
    """Uniformly drawn pairs, each trained once; reports the mean metric."""
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    picks = random_trial_pairs(ctx.zoo.num_pairs, trials, ctx.config.seed)
    trial_metrics, stages, best = [], [], {}
    cache = {}
    for t, k in enumerate(picks):
        # a repeated draw trains the same pair again under the same config;
        # the result is identical, so it is reused but billed again
        if k not in cache:
            cache[k] = _train_pair(ctx, k, "random")
        res = cache[k]
        snap = res.best[k]
        trial_metrics.append(snap.metric)
        stages.append({"name": f"trial{t}:{ctx.zoo.pair_name(k)}", "pairs": [k], "flops": res.flops_total})
        if k not in best or snap.metric > best[k].metric:
            best[k] = snap
    metrics = {k: s.metric for k, s in best.items()}
    ranked = _rank(metrics)
    winner = ranked[0][0]
    return StrategyOutcome("random", ranked, winner, metrics[winner],
                           sum(s["flops"] for s in stages), stages,
                           extra={"trial_pairs": picks, "trial_metrics": trial_metrics,
                                  "mean_metric": float(np.mean(trial_metrics))},
                           winner_theta=best[winner].theta)


def unit1_pair(zoo: ModelZoo) -> int:
    """Best unimodal encoder per modality; ties go to the earlier zoo entry."""
    for enc in list(zoo.encoders_a) + list(zoo.encoders_b):
        if enc.unimodal_score is None:
            raise ConfigurationError(f"encoder {enc.id} has no unimodal score")
    n = max(range(zoo.N), key=lambda i: (zoo.encoders_a[i].unimodal_score, -i))
    m = max(range(zoo.M), key=lambda i: (zoo.encoders_b[i].unimodal_score, -i))
    return zoo.pair_index(n, m)


def run_unit1(ctx: SearchContext) -> StrategyOutcome:
    return _single(ctx, "unit1", unit1_pair(ctx.zoo))


# ---------------------------------------------------------------------------
# advisor


class Advisor(Protocol):
    def ask(self, prompt: str) -> str: ...


class ScriptedAdvisor:
    """Replays canned replies in order (the last one repeats)."""

    def __init__(self, replies):
        self.replies = [replies] if isinstance(replies, str) else list(replies)
        self.prompts: list = []

    def ask(self, prompt: str) -> str:
        self.prompts.append(prompt)
        i = min(len(self.prompts) - 1, len(self.replies) - 1)
        return self.replies[i]


class HttpAdvisor:
    """POSTs ``{"prompt": ...}`` as JSON and reads ``reply`` (or the raw body).

    The bearer credential is read from the environment variable named by
    ``credential_env`` at call time, never from the config file.
    """

    def __init__(self, endpoint: str, credential_env: str = "HYMA_ADVISOR_KEY", timeout: float = 60.0):
        self.endpoint = endpoint
        self.credential_env = credential_env
        self.timeout = timeout

    def ask(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.credential_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.endpoint, json.dumps({"prompt": prompt}).encode(), headers)
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read().decode()
        except (urllib.error.URLError, OSError) as exc:
            raise AdvisorUnavailableError(f"advisor request failed: {exc}") from exc
        try:
            doc = json.loads(body)
        except json.JSONDecodeError:
            return body
        return doc.get("reply", body) if isinstance(doc, dict) else body


PROMPT_TEMPLATE = """\
Pick the pair of pretrained encoders that will work best once joined by a trainable connector.
The image encoder output is frozen, the text encoder output is frozen, and a {connector} \
connector maps text embeddings into the image embedding space. It is trained with a \
contrastive loss on {dataset}.

Target task: {task}

Image encoders:
{image_encoders}

Text encoders:
{text_encoders}

Answer with exactly one pair in the form (image_encoder, text_encoder), using the names above.
"""


def _encoder_lines(encoders) -> str:
    lines = []
    for e in encoders:
        meta = ", ".join(f"{k}={v}" for k, v in sorted(e.metadata.items())) if e.metadata else ""
        lines.append(f"- {e.id}: dim={e.dim}, params={e.param_count}"
                     + (f", unimodal_score={e.unimodal_score}" if e.unimodal_score is not None else "")
                     + (f", {meta}" if meta else ""))
    return "\n".join(lines)


def render_prompt(zoo: ModelZoo, task: str, dataset: str, connector: str) -> str:
    return PROMPT_TEMPLATE.format(connector=connector, dataset=dataset, task=task,
                                  image_encoders=_encoder_lines(zoo.encoders_a),
                                  text_encoders=_encoder_lines(zoo.encoders_b))


_TUPLE = re.compile(r"\(\s*([^(),\n]+?)\s*,\s*([^(),\n]+?)\s*\)")


def _clean(name: str) -> str:
    return name.strip().strip("`'\"*").strip()


def parse_advisor_reply(reply: str, zoo: ModelZoo) -> int:
    """Pair index from the first bracketed ``(image, text)`` tuple in ``reply``.

    Names match encoder ids or a ``name`` metadata entry, case-insensitively.
    """
    names_a = {}
    for i, e in enumerate(zoo.encoders_a):
        for alias in (e.id, e.metadata.get("name")):
            if alias:
                names_a[str(alias).lower()] = i
    names_b = {}
    for j, e in enumerate(zoo.encoders_b):
        for alias in (e.id, e.metadata.get("name")):
            if alias:
                names_b[str(alias).lower()] = j
    matches = _TUPLE.findall(reply)
    if not matches:
        raise AdvisorParseError(f"no (image_encoder, text_encoder) tuple in reply: {reply[:200]!r}")
    a, b = (_clean(x).lower() for x in matches[0])
    if a not in names_a or b not in names_b:
        raise AdvisorParseError(f"unknown encoder in reply tuple ({a}, {b})")
    return zoo.pair_index(names_a[a], names_b[b])


def run_ask_advisor(ctx: SearchContext, advisor: Advisor, *, task_name: str | None = None,
                    dataset_name: str = "paired embeddings") -> StrategyOutcome:
    """Ask the advisor for one pair (one retry on a malformed reply) and train it."""
    prompt = render_prompt(ctx.zoo, task_name or ctx.task.name or ctx.task.kind, dataset_name,
                           ctx.layouts[0].kind)
    replies = []
    for attempt in range(2):
        replies.append(advisor.ask(prompt))
        try:
            k = parse_advisor_reply(replies[-1], ctx.zoo)
            break
        except AdvisorParseError:
            if attempt == 1:
                raise
    return _single(ctx, "ask", k, {"prompt": prompt, "replies": replies})


# ---------------------------------------------------------------------------
# AutoPair


@dataclass
class AutoPairState:
    survivors: list
    budget_remaining: int
    rounds_completed: int = 0
    history: list = field(default_factory=list)  # [{"round", "survivors", "metrics", "flops"}]


def autopair(pairs: Sequence[int], budget_flops: int,
             run_round: Callable[[int, int, int], tuple], round_epochs: int = 2):
    """Iterative train / rank / prune under a FLOPs budget.

    ``run_round(k, epochs, remaining)`` continues pair ``k`` for ``epochs``
    epochs without exceeding ``remaining`` FLOPs and returns
    ``(metric, flops_spent, completed)``. Pairs whose metric is less than or
    equal to the round median are pruned; if that would remove everyone the
    best pair is kept. A lone survivor trains until the budget runs out, as
    does everyone when the budget ends mid-round.

    Returns ``(state, last_metric, elimination_round, flags)``.
    """
    if budget_flops <= 0:
        raise ConfigurationError("budget_flops must be positive")
    state = AutoPairState(list(pairs), int(budget_flops))
    last, eliminated, flags = {}, {}, []
    while True:
        spent, partial = 0, False
        for k in state.survivors:
            metric, flops, completed = run_round(k, round_epochs, state.budget_remaining)
            if flops > state.budget_remaining:
                raise ConfigurationError("run_round overspent the remaining budget")
            state.budget_remaining -= flops
            spent += flops
            last[k] = metric
            partial |= not completed
        state.rounds_completed += 1
        round_metrics = {k: last[k] for k in state.survivors}
        state.history.append({"round": state.rounds_completed, "survivors": list(state.survivors),
                              "metrics": {str(k): v for k, v in round_metrics.items()}, "flops": spent})
        if partial:
            flags.append("partial_round" if len(state.survivors) > 1 else "budget_exhausted")
            break
        if len(state.survivors) == 1:
            if spent == 0:
                flags.append("budget_exhausted")
                break
            continue
        median = statistics.median(round_metrics.values())
        keep = [k for k in state.survivors if round_metrics[k] > median]
        if not keep:
            keep = [order_by_metric(round_metrics)[0]]
        for k in state.survivors:
            if k not in keep:
                eliminated[k] = state.rounds_completed
        state.survivors = keep
    return state, last, eliminated, flags


def run_autopair(ctx: SearchContext, budget_flops: int, round_epochs: int = 2) -> StrategyOutcome:
    thetas = {k: tr.init_direct_theta(ctx.layouts[k], ctx.config.seed, k)
              for k in range(ctx.zoo.num_pairs)}
    rounds = {}

    def run_round(k, epochs, remaining):
        r = rounds.get(k, 0)
        rounds[k] = r + 1
        # a fresh data order per round; parameters carry over
        seed = int(np.random.default_rng([ctx.config.seed, AUTOPAIR_STREAM, r]).integers(2**31))
        cfg = ctx.config.replace(epochs=epochs, seed=seed)
        res = tr.train_direct(k, ctx.zoo, ctx.dataset, ctx.layouts[k], cfg, init_theta=thetas[k],
                              evaluator=ctx.evaluator(), flops_budget=remaining, strategy="autopair")
        ctx.records.extend(res.records)
        thetas[k] = res.theta
        return res.final_metrics[k], res.flops_total, not res.stopped_by_budget

    state, last, eliminated, flags = autopair(range(ctx.zoo.num_pairs), budget_flops, run_round,
                                              round_epochs)
    # survivors first, then pairs in reverse order of elimination
    order = sorted(last, key=lambda k: (-eliminated.get(k, state.rounds_completed + 1), -last[k], k))
    ranked = [(k, last[k]) for k in order]
    winner = ranked[0][0]
    spent = budget_flops - state.budget_remaining
    return StrategyOutcome("autopair", ranked, winner, last[winner], spent,
                           [{"name": f"round{h['round']}", "pairs": h["survivors"], "flops": h["flops"]}
                            for h in state.history],
                           flags=flags,
                           extra={"budget_flops": int(budget_flops), "rounds": state.rounds_completed,
                                  "survivors": state.survivors, "history": state.history},
                           winner_theta=thetas[winner])
