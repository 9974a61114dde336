"""Run configuration: one JSON file describing a whole experiment.

Example::

    {
      "schema_version": 1,
      "seed": 0,
      "output_dir": "runs/planted",
      "zoo": {"synthetic": {"qualities_a": [1.0, 0.6, 0.2], "qualities_b": [0.8],
                            "sample_count": 4096}},
      "connector": {"kind": "mlp1", "hidden": 1024},
      "train": {"batch_size": 128, "epochs": 10},
      "hyma": {"train": {"model_batch": 1}, "cond_dim": 32, "generator_hidden": [64]},
      "eval": {"kind": "retrieval", "k": 1},
      "strategies": {"random": {"trials": 5}, "cgs": {"data_fraction": 0.3333}}
    }

Relative paths resolve against the config file's directory. The root seed
overrides ``train.seed``; every random stream is derived from it.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import embeddings as em
from . import hypernet as hn
from . import trainer as tr
from .errors import ConfigurationError
from .objectives import EvalTask, load_eval_task, retrieval_task

SCHEMA_VERSION = 1
_TOP_KEYS = {"schema_version", "seed", "output_dir", "zoo", "connector", "train", "hyma", "eval",
             "strategies", "name"}


@dataclass
class RunConfig:
    doc: dict
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"config schema_version must be {SCHEMA_VERSION}")
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        if "zoo" not in doc:
            raise ConfigurationError("config needs a 'zoo' section")
        cfg = cls(copy.deepcopy(doc), Path(base_dir))
        cfg.train_config()
        cfg.hyma_train_config()
        return cfg

    def to_dict(self) -> dict:
        return copy.deepcopy(self.doc)

    @property
    def seed(self) -> int:
        return int(self.doc.get("seed", 0))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.doc.get("output_dir", "runs"))

    @property
    def connector_kind(self) -> str:
        return self.doc.get("connector", {}).get("kind", "mlp1")

    @property
    def connector_hidden(self) -> int:
        return int(self.doc.get("connector", {}).get("hidden", 1024))

    def train_config(self) -> tr.TrainConfig:
        d = dict(self.doc.get("train", {}))
        d["seed"] = self.seed
        d.setdefault("mode", "direct-pair")
        return tr.TrainConfig.from_dict(d)

    def hyma_train_config(self) -> tr.TrainConfig:
        d = {**self.doc.get("train", {}), **self.doc.get("hyma", {}).get("train", {})}
        d["seed"] = self.seed
        d["mode"] = "hypernet"
        return tr.TrainConfig.from_dict(d)

    def hyma_options(self) -> dict:
        h = self.doc.get("hyma", {})
        return {"cond_dim": int(h.get("cond_dim", 32)),
                "generator_hidden": tuple(h.get("generator_hidden", (64,))),
                "conditioning": h.get("conditioning", "codebook")}

    def strategy_options(self, name: str) -> dict:
        return dict(self.doc.get("strategies", {}).get(name, {}))

    # -- materialisation ---------------------------------------------------

    def synthetic_section(self) -> dict | None:
        return self.doc["zoo"].get("synthetic")

    def load_zoo(self):
        """``(zoo, dataset)`` from a manifest or an in-memory synthetic zoo."""
        z = self.doc["zoo"]
        if "manifest" in z:
            zoo, dataset, _ = em.load_manifest(self.resolve(z["manifest"]))
            return zoo, dataset
        s = self.synthetic_section()
        if s is None:
            raise ConfigurationError("zoo needs 'manifest' or 'synthetic'")
        return em.planted_zoo(s["qualities_a"], s["qualities_b"], dims_a=s.get("dims_a"),
                              dims_b=s.get("dims_b"), latent_dim=int(s.get("latent_dim", 16)),
                              sample_count=int(s.get("sample_count", 4096)), seed=self.seed,
                              val_fraction=float(s.get("val_fraction", 0.125)),
                              nonlinearity=s.get("nonlinearity", "none"))

    def layouts(self, zoo) -> dict:
        return tr.layouts_for(zoo, self.connector_kind, self.connector_hidden)

    def hyper_config(self, zoo, layouts) -> hn.HyperNetConfig:
        o = self.hyma_options()
        return hn.HyperNetConfig.for_layouts([layouts[k] for k in range(zoo.num_pairs)],
                                             o["cond_dim"], o["generator_hidden"], o["conditioning"],
                                             num_text=zoo.M, image_dims=[e.dim for e in zoo.encoders_a])

    def eval_task(self, dataset) -> EvalTask:
        e = self.doc.get("eval", {})
        if "task" in e:
            return load_eval_task(self.resolve(e["task"]))
        if e.get("kind", "retrieval") != "retrieval":
            raise ConfigurationError("only retrieval tasks can be built without a task file")
        return retrieval_task(dataset.val, k=int(e.get("k", 1)))
