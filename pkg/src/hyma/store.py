"""Append-only results store.

Each run lives in its own directory with a ``status.json`` that is
``running`` while outputs are being written and becomes ``complete`` or
``aborted`` at the end, so partial outputs never look finished.
"""
from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .search import StrategyOutcome
from .trainer import RunRecord

STATUS_FILE = "status.json"


def _write_json(path: Path, doc) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    tmp.replace(path)


class RunStore:
    def __init__(self, root):
        self.root = Path(root)

    def run_dir(self, name: str) -> Path:
        return self.root / name

    def status(self, name: str) -> dict | None:
        p = self.run_dir(name) / STATUS_FILE
        return json.loads(p.read_text()) if p.exists() else None

    @contextmanager
    def run(self, name: str, config_echo: dict):
        """Open a run; marks it aborted if the body raises."""
        d = self.run_dir(name)
        d.mkdir(parents=True, exist_ok=True)
        # a rerun replaces the previous records instead of appending to them
        (d / "records.jsonl").write_text("")
        _write_json(d / STATUS_FILE, {"status": "running", "config": config_echo})
        handle = RunHandle(d, config_echo)
        try:
            yield handle
        except BaseException as exc:
            _write_json(d / STATUS_FILE, {"status": "aborted", "config": config_echo,
                                          "error": f"{type(exc).__name__}: {exc}"})
            raise
        _write_json(d / STATUS_FILE, {"status": "complete", "config": config_echo})

    def outcomes(self) -> dict:
        """Completed outcomes keyed by strategy name."""
        out = {}
        if not self.root.exists():
            return out
        for d in sorted(self.root.iterdir()):
            st = self.status(d.name) if d.is_dir() else None
            if st and st["status"] == "complete" and (d / "outcome.json").exists():
                oc = StrategyOutcome.load(d / "outcome.json")
                out[oc.strategy] = oc
        return out


class RunHandle:
    def __init__(self, directory: Path, config_echo: dict):
        self.dir = directory
        self.config_echo = config_echo

    def append_records(self, records) -> None:
        with open(self.dir / "records.jsonl", "a") as fh:
            for r in records:
                fh.write((r.to_json() if isinstance(r, RunRecord) else json.dumps(r, sort_keys=True)) + "\n")

    def write_outcome(self, outcome: StrategyOutcome) -> None:
        doc = outcome.to_dict()
        doc["config"] = self.config_echo
        _write_json(self.dir / "outcome.json", doc)
        if outcome.winner_theta is not None:
            with open(self.dir / "winner_theta.npy", "wb") as fh:
                np.save(fh, np.asarray(outcome.winner_theta, dtype=np.float64))
