"""Run manifests: strict JSON configuration, defaults, hashing, and task construction."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from . import __version__
from .bnn import ModelSpec
from .fedcore import FedConfig, FederatedTask
from .tasks import (
    LabeledDataset,
    gen_blobs,
    gen_toy_lsq,
    load_csv,
    partition_by_label,
    shards_from_manifest,
    split_shard,
)

OUTPUT_DIR_ENV = "FEDABML_OUTPUT_DIR"
DATA_TAG = 0xDA7A
SPLIT_TAG = 0x5B17

TASK_DEFAULTS = {
    "blobs": {
        "n_classes": 10,
        "dim": 5,
        "n_per_class": 200,
        "spread": 1.0,
        "radius": 3.0,
        "classes_per_client": 2,
        "samples_per_client": None,
        "test_fraction": 0.25,
        "manifest": None,
    },
    "csv": {
        "path": None,
        "n_classes": None,
        "classes_per_client": 2,
        "samples_per_client": None,
        "test_fraction": 0.25,
        "manifest": None,
    },
    "toy": {
        "dim": 2,
        "n_per_client": 50,
        "separation": 4.0,
        "anisotropy": 4.0,
        "label_noise": None,
        "noise_std": 1.0,
        "modes": ["fedabml", "fedavg"],
        "finetune_steps": 10,
    },
}

# the toy runs full-batch, so local_epochs is the number of local steps per round
TOY_FED_DEFAULTS = {
    "n_clients": 2,
    "participation": 1.0,
    "local_epochs": 10,
    "inner_steps": 1,
    "lr_phi": 0.03,
    "lr_theta": 0.03,
    "init_log_std": 0.0,
}

MODEL_KEYS = {"layer_sizes", "hidden", "activation", "likelihood", "noise_std", "bias"}
TOP_KEYS = {"seed", "fed", "model", "task", "output_dir"}
# settings that may change between a checkpoint and its continuation
UNHASHED_FED_KEYS = {"rounds", "eval_every"}


class ConfigError(ValueError):
    pass


def fed_defaults() -> dict:
    cfg = FedConfig()
    out = cfg.to_dict()
    del out["seed"]
    return out


def _strict(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def resolve(raw: dict | None, overrides: dict | None = None) -> dict:
    """Validate a raw config and fill every default; returns a plain-JSON manifest.

    ``overrides`` are dotted keys (``fed.rounds``) that take precedence over
    the file.
    """
    raw = copy.deepcopy(raw or {})
    for key, value in (overrides or {}).items():
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    _strict(raw, TOP_KEYS, "config")

    task_raw = dict(raw.get("task", {}))
    kind = task_raw.pop("kind", "blobs")
    if kind not in TASK_DEFAULTS:
        raise ConfigError(f"task.kind: expected one of {sorted(TASK_DEFAULTS)}, got {kind!r}")

    fed = fed_defaults()
    if kind == "toy":
        fed.update(TOY_FED_DEFAULTS)
    fed_raw = raw.get("fed", {})
    _strict(fed_raw, fed.keys(), "fed")
    fed.update(fed_raw)
    task = dict(TASK_DEFAULTS[kind])
    _strict(task_raw, task.keys(), "task")
    task.update(task_raw)
    task = {"kind": kind, **task}
    if kind == "csv" and not task["path"]:
        raise ConfigError("task.path: required for csv tasks")
    if kind == "toy":
        if fed["n_clients"] != 2:
            raise ConfigError("fed.n_clients: the toy task has exactly 2 clients")
        for m in task["modes"]:
            if m not in ("fedabml", "fedavg", "perfedavg", "pfedme"):
                raise ConfigError(f"task.modes: unknown mode {m!r}")

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed: expected a nonnegative integer")

    model_raw = raw.get("model", {})
    _strict(model_raw, MODEL_KEYS, "model")
    model = _resolve_model(model_raw, task)

    manifest = {
        "version": __version__,
        "seed": seed,
        "fed": fed,
        "model": model,
        "task": task,
        "output_dir": raw.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV, "runs"),
    }
    fed_config(manifest)
    model_spec(manifest)
    return manifest


def _resolve_model(model_raw: dict, task: dict) -> dict:
    if task["kind"] == "toy":
        model = {"layer_sizes": [task["dim"], 1], "activation": "identity", "likelihood": "gaussian",
                 "noise_std": task["noise_std"], "bias": False}
    else:
        model = {"layer_sizes": None, "activation": "relu", "likelihood": "categorical", "noise_std": 1.0, "bias": True}
    hidden = model_raw.get("hidden", [32])
    model.update({k: v for k, v in model_raw.items() if k != "hidden"})
    if model["layer_sizes"] is None:
        n_in = task.get("dim")
        n_out = task.get("n_classes")
        if n_in is None or n_out is None:
            if task["kind"] == "csv":
                ds = load_csv(task["path"], n_classes=task.get("n_classes"))
                n_in, n_out = ds.dim, ds.n_classes
        model["layer_sizes"] = [n_in, *hidden, n_out]
    return model


def fed_config(manifest: dict) -> FedConfig:
    try:
        return FedConfig(seed=manifest["seed"], **manifest["fed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"fed: {exc}") from None


def model_spec(manifest: dict) -> ModelSpec:
    m = manifest["model"]
    try:
        return ModelSpec(tuple(m["layer_sizes"]), m["activation"], m["likelihood"], m["noise_std"], m["bias"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def manifest_hash(manifest: dict) -> str:
    """Compatibility key: everything that determines the trajectory, minus run length and paths."""
    core = copy.deepcopy(manifest)
    core.pop("output_dir", None)
    core.pop("version", None)
    for k in UNHASHED_FED_KEYS:
        core["fed"].pop(k, None)
    blob = json.dumps(core, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return raw


# ---------------------------------------------------------------------------
# task construction


def data_rng(manifest: dict) -> np.random.Generator:
    return np.random.default_rng([manifest["seed"], DATA_TAG])


def load_dataset(manifest: dict) -> LabeledDataset:
    task = manifest["task"]
    if task["kind"] == "blobs":
        return gen_blobs(task["n_classes"], task["dim"], task["n_per_class"], task["spread"], data_rng(manifest),
                         radius=task["radius"])
    if task["kind"] == "csv":
        return load_csv(task["path"], n_classes=task.get("n_classes"))
    raise ConfigError(f"task kind {task['kind']!r} has no labeled dataset")


def partition(manifest: dict, dataset: LabeledDataset, n_clients: int):
    task = manifest["task"]
    spc = task["samples_per_client"] or len(dataset) // n_clients
    rng = np.random.default_rng([manifest["seed"], DATA_TAG, 1])
    return partition_by_label(dataset, n_clients, task["classes_per_client"], spc, rng)


def split_clients(manifest: dict, shards):
    frac = manifest["task"]["test_fraction"]
    train, test = [], []
    for sh in shards:
        tr, te = split_shard(sh, frac, np.random.default_rng([manifest["seed"], SPLIT_TAG, sh.client_id]))
        train.append(tr)
        test.append(te)
    return train, test


def build_task(manifest: dict) -> FederatedTask:
    spec = model_spec(manifest)
    task = manifest["task"]
    if task["kind"] == "toy":
        clients, target = gen_toy_lsq(
            task["dim"], task["n_per_client"], task["separation"], data_rng(manifest),
            noise_std=task["noise_std"], anisotropy=task["anisotropy"], label_noise=task["label_noise"],
        )
        return FederatedTask(spec, [c.shard(i) for i, c in enumerate(clients)], target=target)
    dataset = load_dataset(manifest)
    n = manifest["fed"]["n_clients"]
    if task["manifest"]:
        mapping = json.loads(Path(task["manifest"]).read_text(encoding="utf-8"))
        shards = shards_from_manifest(dataset, mapping)
        if len(shards) != n:
            raise ConfigError(f"fed.n_clients is {n} but {task['manifest']} lists {len(shards)} clients")
    else:
        shards = partition(manifest, dataset, n)
    train, test = split_clients(manifest, shards)
    return FederatedTask(spec, train, test)
