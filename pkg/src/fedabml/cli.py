"""Command-line interface.

Exit codes: 0 success, 2 configuration/input error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as C
from . import metrics
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fedcore import ClientDivergence, FederatedTask, Mode, init_theta, personalize, personalize_phi, run_training
from .tasks import ShiftKind, load_csv, manifest_of, shards_from_manifest, write_csv

log = logging.getLogger("fedabml")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
FINETUNE_GRID = (0, 1, 2, 3, 4, 5, 8, 10)


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise C.ConfigError(f"--set expects key=value, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _manifest_from_args(args, default_kind=None) -> dict:
    raw = C.load_config(args.config) if getattr(args, "config", None) else {}
    if default_kind and isinstance(raw, dict) and isinstance(raw.get("task", {}), dict):
        raw.setdefault("task", {}).setdefault("kind", default_kind)
    overrides = dict(_parse_override(s) for s in getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rounds", None) is not None:
        overrides["fed.rounds"] = args.rounds
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return C.resolve(raw, overrides)


def _out_dir(manifest: dict, args) -> Path:
    out = Path(getattr(args, "out", None) or manifest["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _sidecar(out: Path, message: str) -> None:
    # timestamps live only here so that result files stay reproducible
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    with (out / "run.log").open("a", encoding="utf-8") as fh:
        fh.write(f"{stamp} {message}\n")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _progress(rec):
    acc = "" if rec.mean_acc is None else f" acc={rec.mean_acc:.4f}"
    dist = "" if rec.dist_to_target is None else f" dist={rec.dist_to_target:.4f}"
    log.info("round %d loss=%.4f%s%s", rec.round, rec.mean_loss, acc, dist)


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    manifest = _manifest_from_args(args)
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _finish_run(out: Path, manifest: dict, state, prefix: str = "") -> None:
    metrics.export_history(state.history, out / f"{prefix}history.jsonl", "jsonl")
    metrics.export_history(state.history, out / f"{prefix}history.csv", "csv")
    save_checkpoint(out / "checkpoint.fabm", manifest, C.manifest_hash(manifest), state)
    _write_json(out / "manifest.json", manifest)


def cmd_train(args) -> int:
    manifest = _manifest_from_args(args)
    if manifest["task"]["kind"] == "toy":
        raise C.ConfigError("task.kind: use run-toy for the toy task")
    cfg = C.fed_config(manifest)
    task = C.build_task(manifest)
    out = _out_dir(manifest, args)
    _sidecar(out, f"train start hash={C.manifest_hash(manifest)} rounds={cfg.rounds}")
    state = run_training(cfg, task, threads=args.threads, callback=_progress)
    _finish_run(out, manifest, state)
    _sidecar(out, f"train done next_round={state.next_round}")
    print(f"trained {state.next_round} rounds; checkpoint at {out / 'checkpoint.fabm'}")
    return EXIT_OK


def _load_checked(path, config_path=None):
    manifest, stored, state = load_checkpoint(path)
    actual = C.manifest_hash(manifest)
    if actual != stored:
        raise C.ConfigError(f"checkpoint manifest hash {actual} does not match stored hash {stored}")
    if config_path:
        given = C.manifest_hash(C.resolve(C.load_config(config_path)))
        if given != stored:
            raise C.ConfigError(f"config hash {given} does not match checkpoint hash {stored}; refusing")
    return manifest, state


def cmd_resume(args) -> int:
    manifest, state = _load_checked(args.checkpoint, args.config)
    manifest = dict(manifest, fed=dict(manifest["fed"], rounds=state.next_round + args.rounds))
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    if args.rounds < 0:
        raise C.ConfigError("--rounds must be nonnegative")
    cfg = C.fed_config(manifest)
    task = C.build_task(manifest)
    _sidecar(out, f"resume from round {state.next_round} for {args.rounds} rounds")
    state = run_training(cfg, task, state=state, rounds=args.rounds, threads=args.threads, callback=_progress)
    _finish_run(out, manifest, state)
    print(f"resumed to round {state.next_round}; checkpoint at {out / 'checkpoint.fabm'}")
    return EXIT_OK


def _new_client_shards(manifest: dict, mapping_path):
    dataset = C.load_dataset(manifest)
    mapping = json.loads(Path(mapping_path).read_text(encoding="utf-8"))
    return C.split_clients(manifest, shards_from_manifest(dataset, mapping))


def finetune_table(theta, train, test, cfg, spec, grid=FINETUNE_GRID) -> dict:
    """Mean test accuracy of new clients after each number of fine-tune epochs in ``grid``."""
    per_client = []
    for tr, te in zip(train, test):
        _, curve = personalize(theta, tr, max(grid), cfg, spec, te)
        per_client.append({"client_id": tr.client_id, "accuracy": [curve[e]["accuracy"] for e in grid]})
    accs = np.array([row["accuracy"] for row in per_client], dtype=np.float64)
    return {
        "mode": cfg.mode.value,
        "epochs": list(grid),
        "mean_accuracy": accs.mean(axis=0).tolist(),
        "per_client": per_client,
    }


def cmd_finetune(args) -> int:
    manifest, state = _load_checked(args.checkpoint, args.config)
    cfg = C.fed_config(manifest)
    spec = C.model_spec(manifest)
    grid = tuple(int(e) for e in args.epochs.split(",")) if args.epochs else FINETUNE_GRID
    train, test = _new_client_shards(manifest, args.manifest)
    table = finetune_table(state.theta, train, test, cfg, spec, grid)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "finetune.json", table)
    with (out / "finetune.csv").open("w", encoding="utf-8") as fh:
        fh.write("mode," + ",".join(f"epoch_{e}" for e in grid) + "\n")
        fh.write(table["mode"] + "," + ",".join(repr(a) for a in table["mean_accuracy"]) + "\n")
    print("epochs   " + " ".join(f"{e:>7d}" for e in grid))
    print(f"{table['mode']:<8} " + " ".join(f"{100 * a:7.2f}" for a in table["mean_accuracy"]))
    return EXIT_OK


def client_ood_sets(task: FederatedTask, dataset, kind=ShiftKind.LABEL_HOLDOUT, delta: float = 3.0) -> dict:
    """Per client: (ID features, OOD features).

    ID is the client's own test split. OOD is either every sample of the
    classes the client never holds (label holdout) or its test split moved
    by ``delta`` (mean shift).
    """
    kind = ShiftKind(kind)
    sets = {}
    for te in task.test:
        if kind is ShiftKind.LABEL_HOLDOUT:
            ood = dataset.subset(np.flatnonzero(~np.isin(dataset.labels, te.class_inventory))).features
        else:
            ood = te.features + delta
        sets[te.client_id] = (te.features, ood)
    return sets


def entropy_report(spec, phis, sets, s, seed, bins=20) -> dict:
    """Predictive-entropy summary and histograms for each client's (ID, OOD) pair."""
    clients = []
    for cid in sorted(sets):
        if cid not in phis:
            continue
        id_x, ood_x = sets[cid]
        rng = metrics.eval_rng(seed, cid)
        ent_id = metrics.predictive_entropy(spec, phis[cid], id_x, s, rng)
        ent_ood = metrics.predictive_entropy(spec, phis[cid], ood_x, s, rng)
        clients.append({
            "client_id": cid,
            "id_mean": float(ent_id.mean()),
            "ood_mean": float(ent_ood.mean()),
            "id_hist": metrics.entropy_histogram(ent_id, spec.n_out, bins),
            "ood_hist": metrics.entropy_histogram(ent_ood, spec.n_out, bins),
        })
    if not clients:
        raise C.ConfigError("no client has both a posterior and evaluation data")
    return {
        "id_mean": float(np.mean([c["id_mean"] for c in clients])),
        "ood_mean": float(np.mean([c["ood_mean"] for c in clients])),
        "clients": clients,
    }


def cmd_entropy_report(args) -> int:
    manifest, state = _load_checked(args.checkpoint, args.config)
    spec = C.model_spec(manifest)
    cfg = C.fed_config(manifest)
    if bool(args.id_data) != bool(args.ood_data):
        raise C.ConfigError("--id-data and --ood-data must be given together")
    if args.id_data:
        id_x = load_csv(args.id_data, n_features=spec.n_in, n_classes=spec.n_out).features
        ood_x = load_csv(args.ood_data, n_features=spec.n_in, n_classes=spec.n_out).features
        phis = dict(state.phis) or {-1: state.theta}
        sets = {cid: (id_x, ood_x) for cid in phis}
    else:
        task = C.build_task(manifest)
        sets = client_ood_sets(task, C.load_dataset(manifest), args.ood, args.shift_delta)
        phis = state.phis
    report = entropy_report(spec, phis, sets, cfg.eval_samples, cfg.seed, args.bins)
    report["ood_kind"] = "csv" if args.id_data else args.ood
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "entropy_report.json", report)
    print(f"mean entropy  ID {report['id_mean']:.4f}  OOD {report['ood_mean']:.4f}  (nats)")
    return EXIT_OK


def cmd_partition(args) -> int:
    manifest = _manifest_from_args(args)
    if manifest["task"]["kind"] == "toy":
        raise C.ConfigError("task.kind: the toy task is not partitioned")
    dataset = C.load_dataset(manifest)
    n_total = args.n_clients or manifest["fed"]["n_clients"]
    shards = C.partition(manifest, dataset, n_total)
    out = _out_dir(manifest, args)
    if args.export_csv:
        write_csv(dataset, out / "dataset.csv")
    if args.new_fraction:
        n_new = int(round(args.new_fraction * n_total))
        if not 0 < n_new < n_total:
            raise C.ConfigError("--new-fraction must leave at least one training and one new client")
        order = np.random.default_rng([manifest["seed"], C.DATA_TAG, 2]).permutation(n_total)
        new_ids = set(int(i) for i in order[:n_new])
        _write_json(out / "train_manifest.json", manifest_of([s for s in shards if s.client_id not in new_ids]))
        _write_json(out / "new_manifest.json", manifest_of([s for s in shards if s.client_id in new_ids]))
        print(f"wrote {n_total - n_new} training and {n_new} new clients to {out}")
    else:
        _write_json(out / "manifest.json", manifest_of(shards))
        print(f"wrote {n_total} clients to {out / 'manifest.json'}")
    return EXIT_OK


def toy_finetune_loss(theta, shard, cfg, spec, steps: int, rng) -> float:
    """Least-squares loss after ``steps`` full-batch local steps from ``theta``."""
    local = replace(cfg, inner_steps=1, batch_size=shard.n)
    phi = theta
    for phi in personalize_phi(theta, shard, steps, local, spec, rng):
        pass
    resid = shard.targets.reshape(-1) - shard.features @ phi.mean
    return float(0.5 * resid @ resid / spec.noise_std**2)


def run_toy(manifest: dict) -> dict:
    """Train every configured mode on the same toy task; returns the per-round series."""
    task = C.build_task(manifest)
    spec = task.spec
    records = []
    summary = {}
    for mode in manifest["task"]["modes"]:
        cfg = replace(C.fed_config(manifest), mode=Mode(mode), batch_size=max(s.n for s in task.train))
        init = metrics.distance_to_target(init_theta(spec, cfg), task.target)
        # one round at a time gives the same trajectory as a single call
        state, theta_series = None, []
        for _ in range(cfg.rounds):
            state = run_training(cfg, task, state=state, rounds=1)
            theta_series.append(state.theta)
        for rec, theta in zip(state.history.records, theta_series):
            losses = [
                toy_finetune_loss(theta, sh, cfg, spec, manifest["task"]["finetune_steps"],
                                  np.random.default_rng([cfg.seed, rec.round, sh.client_id, 0xF7]))
                for sh in task.train
            ]
            records.append({"round": rec.round, "mode": mode, "dist_to_target": rec.dist_to_target,
                            "finetune_loss": float(np.mean(losses))})
        summary[mode] = {"initial_distance": init, "final_distance": state.history.records[-1].dist_to_target}
    return {"target": task.target.tolist(), "records": records, "summary": summary}


def cmd_run_toy(args) -> int:
    manifest = _manifest_from_args(args, default_kind="toy")
    if manifest["task"]["kind"] != "toy":
        raise C.ConfigError("task.kind: run-toy needs a toy task")
    out = _out_dir(manifest, args)
    result = run_toy(manifest)
    with (out / "toy_history.jsonl").open("w", encoding="utf-8") as fh:
        for rec in result["records"]:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_json(out / "toy_summary.json", {"target": result["target"], "summary": result["summary"]})
    _write_json(out / "manifest.json", manifest)
    for mode, s in result["summary"].items():
        print(f"{mode:<9} initial {s['initial_distance']:.4f}  final {s['final_distance']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedabml", description="Personalized federated learning via amortized Bayesian meta-learning")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("config", nargs=None if required else "?", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. fed.rounds=10")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: config output_dir or $%s)" % C.OUTPUT_DIR_ENV)

    p = sub.add_parser("validate", help="print the resolved manifest")
    with_config(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="run federated training and write history + checkpoint")
    with_config(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("resume", help="continue training from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--rounds", type=int, required=True, help="extra rounds")
    p.add_argument("--config", help="refuse unless this config hashes to the checkpoint's")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("finetune", help="personalize a trained prior on new clients")
    p.add_argument("checkpoint")
    p.add_argument("--manifest", required=True, help="partition manifest of the new clients")
    p.add_argument("--epochs", help="comma-separated grid (default 0,1,2,3,4,5,8,10)")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("entropy-report", help="predictive-entropy histograms on ID vs OOD data")
    p.add_argument("checkpoint")
    p.add_argument("--ood", choices=[k.value for k in ShiftKind], default=ShiftKind.LABEL_HOLDOUT.value,
                   help="OOD construction relative to each client's own test split")
    p.add_argument("--shift-delta", type=float, default=3.0, help="feature offset for --ood mean_shift")
    p.add_argument("--id-data", help="CSV of ID samples shared by all clients (needs --ood-data)")
    p.add_argument("--ood-data", help="CSV of OOD samples shared by all clients")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_entropy_report)

    p = sub.add_parser("partition", help="write a label-skew partition manifest")
    with_config(p)
    p.add_argument("--n-clients", type=int)
    p.add_argument("--new-fraction", type=float, help="also split clients into train/new manifests")
    p.add_argument("--export-csv", action="store_true", help="write the dataset as CSV too")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("run-toy", help="two-client least-squares comparison")
    with_config(p)
    p.add_argument("--rounds", type=int)
    p.set_defaults(func=cmd_run_toy)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (C.ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ClientDivergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
