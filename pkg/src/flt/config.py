"""Scenario files: defaults, schema validation and semantic checks.

A scenario is one JSON object with the sections ``dataset``, ``partition``,
``model``, ``encoder``, ``fcr``, ``federation``, ``output`` and a top-level
``seed``. Missing keys take the values in :data:`DEFAULTS`. The schema
shipped in ``flt/schema/scenario.schema.json`` documents every key.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from jsonschema import Draft202012Validator

__all__ = [
    "DEFAULTS",
    "ConfigError",
    "ScenarioConfig",
    "schema",
    "validate",
    "load_config",
]

DEFAULTS: dict = {
    "seed": 0,
    "dataset": {"kind": "synthetic", "num_classes": 10, "dims": 8, "samples_per_class": 200,
                "mean_scale": 5.0, "std": 1.0},
    "partition": {"mode": "pathological", "M": 20, "C": 5, "labels_per_cluster": 2, "alpha": 50,
                  "delta": 1.0, "samples_per_client": None, "test_fraction": 0.2,
                  "cluster_labels": None, "cluster_membership": None},
    "model": {"architecture": "mlp", "hidden": 200, "dropout": 0.5, "layers": None},
    "encoder": {"mode": "identity", "architecture": "conv_ae", "latent_dim": 128, "hidden": 32,
                "checkpoint": None, "pretrain_epochs": 2, "pretrain_lr": 0.5,
                "pretrain_batch_size": 20, "pretrain_samples": 2000, "finetune_epochs": 5,
                "finetune_lr": 0.01, "finetune_batch_size": 10},
    "fcr": {"k": 5, "gamma": 1.0, "C": None, "baseline": "umap",
            "umap": {"n_neighbors": 15, "target_dim": 2, "min_dist": 0.1, "epochs": 200,
                     "negative_sample_rate": 5, "learning_rate": 1.0, "spread": 1.0,
                     "init": "spectral"}},
    "federation": {"methods": ["flt_full"], "T": 100, "rho": 0.2, "E": 5, "batch_size": 10,
                   "lr": 0.01, "normalization": "row_stochastic", "workers": 1, "dynamic": None,
                   "drift": []},
    "output": {"dir": "runs/out", "checkpoints": True, "plots": False, "bound_report": False,
               "bound_p_err": None},
}

# sections whose inner keys depend on a discriminator; defaults only fill the chosen variant
_DATASET_DEFAULTS = {
    "synthetic": DEFAULTS["dataset"],
    "idx": {"kind": "idx", "num_classes": None, "limit": None},
}


class ConfigError(ValueError):
    """Raised with every problem found in a scenario, one per line."""

    def __init__(self, errors: list[str], source=None):
        self.errors = list(errors)
        head = f"{source}: " if source else ""
        super().__init__(head + f"{len(self.errors)} configuration error(s)\n  - " + "\n  - ".join(self.errors))


def schema() -> dict:
    text = resources.files("flt").joinpath("schema/scenario.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _with_defaults(raw: dict) -> dict:
    base = copy.deepcopy(DEFAULTS)
    kind = (raw.get("dataset") or {}).get("kind", "synthetic")
    base["dataset"] = copy.deepcopy(_DATASET_DEFAULTS.get(kind, {}))
    return _merge(base, raw)


def _path_errors(err) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def _semantic_errors(cfg: dict, base_dir: Path) -> list[str]:
    errs = []
    ds, part, enc, fcr, fed = cfg["dataset"], cfg["partition"], cfg["encoder"], cfg["fcr"], cfg["federation"]
    M, C = part["M"], part["C"]

    if ds["kind"] == "idx":
        for key in ("images", "labels"):
            p = resolve(ds[key], base_dir)
            if not p.is_file():
                errs.append(f"dataset/{key}: file not found: {p}")
    if enc.get("checkpoint"):
        p = resolve(enc["checkpoint"], base_dir)
        if not p.is_file():
            errs.append(f"encoder/checkpoint: file not found: {p}")

    mode = part["mode"]
    if mode in ("pathological", "overlap1"):
        if M % C:
            errs.append(f"partition: M={M} is not divisible by C={C}")
        L = ds.get("num_classes")
        if L is not None and part["labels_per_cluster"] * C - (C if mode == "overlap1" else 0) > L:
            errs.append(f"partition: {C} clusters x {part['labels_per_cluster']} labels need more "
                        f"than the {L} available classes")
        if mode == "overlap1" and part["labels_per_cluster"] < 2:
            errs.append("partition: overlap1 needs labels_per_cluster >= 2")
    else:
        cl, cm = part.get("cluster_labels"), part.get("cluster_membership")
        if cl is None or cm is None:
            errs.append("partition: structured mode needs cluster_labels and cluster_membership")
        else:
            if len(cl) != C or len(cm) != C:
                errs.append(f"partition: cluster_labels and cluster_membership must have C={C} entries")
            members = sorted(i for grp in cm for i in grp)
            if members != list(range(M)):
                errs.append(f"partition: cluster_membership must list every client 0..{M - 1} exactly once")
            flat = [l for grp in cl for l in grp]
            if len(flat) != len(set(flat)):
                errs.append("partition: cluster_labels must be disjoint")

    if fcr.get("C") is not None and fcr["C"] > M:
        errs.append(f"fcr/C: {fcr['C']} clusters requested for {M} clients")

    if enc["mode"] != "identity":
        if enc["architecture"] == "conv_ae" and ds["kind"] != "idx":
            errs.append("encoder: conv_ae needs image data (dataset.kind = idx)")
        if enc["architecture"] == "dense_ae" and ds["kind"] != "synthetic":
            errs.append("encoder: dense_ae works on vector data (dataset.kind = synthetic)")
    arch = cfg["model"]["architecture"]
    if arch == "small_cnn" and ds["kind"] != "idx":
        errs.append("model: small_cnn needs image data (dataset.kind = idx)")
    if arch == "custom" and not cfg["model"].get("layers"):
        errs.append("model: custom architecture needs a non-empty layers list")

    for j, d in enumerate(fed.get("drift") or []):
        if d["client"] >= M or d["swap_with"] >= M:
            errs.append(f"federation/drift/{j}: client ids must be < M={M}")
        if d["client"] == d["swap_with"]:
            errs.append(f"federation/drift/{j}: a client cannot swap with itself")
        if d["round"] > fed["T"]:
            errs.append(f"federation/drift/{j}: round {d['round']} is after the last round T={fed['T']}")
    return errs


def resolve(path, base_dir) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(base_dir) / p


def validate(raw: dict, base_dir=".") -> list[str]:
    """All problems with ``raw`` (schema first, then cross-field checks); empty if valid."""
    if not isinstance(raw, dict):
        return ["<root>: scenario must be a JSON object"]
    v = Draft202012Validator(schema())
    errs = [_path_errors(e) for e in sorted(v.iter_errors(raw), key=lambda e: list(e.absolute_path))]
    if errs:
        return errs
    return _semantic_errors(_with_defaults(raw), Path(base_dir))


@dataclass
class ScenarioConfig:
    seed: int
    dataset: dict
    partition: dict
    model: dict
    encoder: dict
    fcr: dict
    federation: dict
    output: dict
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir=".") -> "ScenarioConfig":
        errs = validate(raw, base_dir)
        if errs:
            raise ConfigError(errs)
        cfg = _with_defaults(raw)
        return cls(base_dir=Path(base_dir), **cfg)

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in DEFAULTS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def path(self, value) -> Path:
        """Resolve a path from the file relative to the file's own directory."""
        return resolve(value, self.base_dir)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError([f"file not found: {path}"]) from None
    except json.JSONDecodeError as e:
        raise ConfigError([f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}"], path) from None
    errs = validate(raw, path.parent)
    if errs:
        raise ConfigError(errs, path)
    return ScenarioConfig.from_dict(raw, path.parent)
