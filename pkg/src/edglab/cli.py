"""Single command-line entry point: data generation, training, evaluation,
sweeps, bound certification, and report (re-)emission.

Exit codes: 0 success, 1 experiment failure, 2 configuration/usage error.
Precedence for settings: explicit flags > --set overrides > --config file >
built-in defaults. Events are line-delimited JSON unless --quiet.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baselines, bounds, data, dpnet, harness, nn

CACHE_ENV_VAR = "EDGLAB_CACHE_DIR"


class CliConfigError(ValueError):
    pass


def emit(event: str, quiet: bool = False, **fields) -> None:
    if quiet:
        detail = " ".join(f"{k}={v}" for k, v in fields.items())
        print(f"{event}: {detail}")
    else:
        print(json.dumps({"event": event, **fields}, sort_keys=True))


def _parse_override(text: str):
    if "=" not in text:
        raise CliConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    for cast in (int, float):
        try:
            return key, cast(raw)
        except ValueError:
            continue
    if raw.lower() in ("true", "false"):
        return key, raw.lower() == "true"
    return key, raw


def resolve_settings(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- --set overrides <- explicit flags."""
    settings = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise CliConfigError(f"config file {path} must hold a JSON object")
        settings.update(loaded)
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        settings[key] = value
    for key in defaults:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            settings[key] = flag
    return settings


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", default="edglab-out", help="output directory for artifacts")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--workers", type=int, default=None, help="worker thread count")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    parser.add_argument("--quiet", action="store_true", help="plain one-line logs instead of JSON")
    parser.add_argument(
        "--cache-dir",
        default=None,
        help=f"dataset cache directory (default from ${CACHE_ENV_VAR})",
    )


def _spec_from(settings: dict) -> data.EnvironmentSpec:
    overrides = {}
    if settings.get("num-domains") is not None:
        overrides["num_domains"] = int(settings["num-domains"])
    if settings.get("samples") is not None:
        overrides["samples_per_domain"] = int(settings["samples"])
    if settings.get("distance") is not None:
        overrides["domain_distance"] = float(settings["distance"])
    try:
        return data.default_spec(settings["dataset"], seed=int(settings["seed"]), **overrides)
    except data.ConfigurationError as exc:
        raise CliConfigError(str(exc))


def _load_dataset(settings: dict, quiet: bool) -> list[data.DomainData]:
    spec = _spec_from(settings)
    cache_dir = settings.get("cache-dir") or os.environ.get(CACHE_ENV_VAR)
    cache_path = None
    if cache_dir:
        tag = (
            f"{spec.kind}-s{spec.seed}-m{spec.num_domains}"
            f"-n{spec.samples_per_domain}-d{spec.domain_distance:g}.bin"
        )
        cache_path = Path(cache_dir) / tag
        if cache_path.exists():
            emit("dataset-cache-hit", quiet, path=str(cache_path))
            return data.load_domains(cache_path)
    if spec.kind == "rmnist":
        images, labels = settings.get("images"), settings.get("labels")
        if not images or not labels:
            raise CliConfigError("rmnist needs --images and --labels IDX paths")
        domains = data.load_rmnist(images, labels, spec)
    else:
        domains = data.generate(spec)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        data.save_domains(cache_path, domains)
        emit("dataset-cached", quiet, path=str(cache_path))
    return domains


DATASET_DEFAULTS = {
    "dataset": "evolcircle",
    "seed": 0,
    "num-domains": None,
    "samples": None,
    "distance": None,
    "images": None,
    "labels": None,
    "cache-dir": None,
}


def cmd_gen_data(args) -> int:
    settings = resolve_settings(args, DATASET_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domains = _load_dataset(settings, args.quiet)
    path = out / f"{settings['dataset']}.bin"
    data.save_domains(path, domains)
    emit(
        "gen-data",
        args.quiet,
        path=str(path),
        domains=len(domains),
        samples_per_domain=domains[0].n,
        feature_dim=domains[0].dim,
    )
    return 0


TRAIN_DEFAULTS = {
    **DATASET_DEFAULTS,
    "algo": "dpnets",
    "steps": 1000,
    "lr": 0.01,
    "batch": 16,
    "hidden": "",
    "embed": "",
}


def _parse_widths(text: str) -> tuple[int, ...]:
    if not text:
        return ()
    try:
        return tuple(int(v) for v in str(text).split(",") if v != "")
    except ValueError:
        raise CliConfigError(f"expected comma-separated widths, got {text!r}")


def cmd_train(args) -> int:
    settings = resolve_settings(args, TRAIN_DEFAULTS)
    algo = settings["algo"]
    if algo not in harness.ALGORITHMS:
        raise CliConfigError(f"unknown --algo {algo!r}; choose from {harness.ALGORITHMS}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domains = _load_dataset(settings, args.quiet)
    sources, target = domains[:-1], domains[-1]
    seed = int(settings["seed"])
    steps, lr, batch = int(settings["steps"]), float(settings["lr"]), int(settings["batch"])
    embed = _parse_widths(settings["embed"]) or (sources[0].dim,)
    hidden = _parse_widths(settings["hidden"])
    spec = _spec_from(settings)
    sidecar = {
        "algo": algo,
        "dataset": settings["dataset"],
        "seed": seed,
        "num_classes": sources[0].num_classes,
        "feature_dim": sources[0].dim,
        "num_domains_seen": len(sources),
        "spec": {
            "kind": spec.kind,
            "num_domains": spec.num_domains,
            "samples_per_domain": spec.samples_per_domain,
            "domain_distance": spec.domain_distance,
            "seed": spec.seed,
        },
    }
    ckpt_path = out / "model.ckpt"
    if algo in ("dpnets", "proto"):
        dims = (sources[0].dim,) + embed
        cfg = dpnet.TrainConfig(steps=steps, n_per_class=batch, lr=lr, seed=seed)
        if algo == "dpnets":
            model = dpnet.init_dpnet(dims, sources[0].num_classes, seed)
            model, trace = dpnet.train(
                model, sources, cfg,
                progress=None if args.quiet else lambda s, l: s % 200 == 0 and emit("train-step", False, step=s, loss=l),
            )
            nn.save_checkpoint(ckpt_path, [model.f_phi, model.f_psi])
        else:
            model, trace = baselines.train_proto_vanilla(sources, cfg, dims)
            nn.save_checkpoint(ckpt_path, [model.f_phi])
        sidecar.update(embed_dim=model.embed_dim, dims=list(dims))
        acc = harness.evaluate_accuracy(lambda x: dpnet.predict_target(model, sources[-1], x), target)
    else:
        mode, last_k = harness._erm_variant(algo)
        cfg = baselines.ErmConfig(
            steps=steps, batch_size=batch * sources[0].num_classes, lr=lr, seed=seed, hidden=hidden
        )
        model = baselines.train_erm(sources, cfg, index_mode=mode, last_k=last_k)
        nn.save_checkpoint(ckpt_path, [model.net])
        sidecar.update(index_mode=model.index_mode.value, hidden=list(hidden))
        acc = harness.evaluate_accuracy(lambda x: baselines.predict_erm(model, x), target)
    (out / "model.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))
    digest = hashlib.sha256(ckpt_path.read_bytes()).hexdigest()
    emit(
        "train",
        args.quiet,
        algo=algo,
        dataset=settings["dataset"],
        target_accuracy=acc,
        checkpoint=str(ckpt_path),
        checkpoint_sha256=digest,
    )
    return 0


EVAL_DEFAULTS = {**DATASET_DEFAULTS, "dataset": None, "seed": None, "checkpoint": None}


def cmd_eval(args) -> int:
    settings = resolve_settings(args, EVAL_DEFAULTS)
    ckpt = settings.get("checkpoint")
    if not ckpt:
        raise CliConfigError("--checkpoint is required")
    sidecar_path = Path(ckpt).with_suffix(".json")
    if not sidecar_path.exists():
        raise CliConfigError(f"missing checkpoint sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    # The sidecar pins the training environment; flags may override any part.
    saved = sidecar.get("spec", {})
    for key, spec_key in (
        ("dataset", "kind"),
        ("seed", "seed"),
        ("num-domains", "num_domains"),
        ("samples", "samples_per_domain"),
        ("distance", "domain_distance"),
    ):
        if settings.get(key) is None and spec_key in saved:
            settings[key] = saved[spec_key]
    domains = _load_dataset(settings, args.quiet)
    sources, target = domains[:-1], domains[-1]
    nets = nn.load_checkpoint(ckpt)
    algo = sidecar["algo"]
    if algo in ("dpnets", "proto"):
        f_phi = nets[0]
        f_psi = nets[1] if len(nets) > 1 else nets[0]
        model = dpnet.DPNetModel(f_phi, f_psi, sidecar["embed_dim"], sidecar["num_classes"])
        acc = harness.evaluate_accuracy(lambda x: dpnet.predict_target(model, sources[-1], x), target)
    else:
        model = baselines.ErmModel(
            net=nets[0],
            index_mode=baselines.IndexMode(sidecar["index_mode"]),
            num_domains_seen=sidecar["num_domains_seen"],
            feature_dim=sidecar["feature_dim"],
        )
        acc = harness.evaluate_accuracy(lambda x: baselines.predict_erm(model, x), target)
    emit("eval", args.quiet, algo=algo, dataset=settings["dataset"], target_accuracy=acc)
    return 0


SWEEP_DEFAULTS = {
    **DATASET_DEFAULTS,
    "dataset": "rotatedcloud",
    "axis": "distance",
    "values": "3,5,7,10,15,20",
    "algos": "dpnets,erm",
    "trials": 20,
    "n-seeds": 5,
    "strategy": "oracle_max_query",
    "workers": 1,
}


def cmd_sweep(args) -> int:
    settings = resolve_settings(args, SWEEP_DEFAULTS)
    axis = {"distance": "domain_distance", "count": "domain_count"}.get(settings["axis"])
    if axis is None:
        raise CliConfigError(f"--axis must be 'distance' or 'count', got {settings['axis']!r}")
    try:
        values = tuple(float(v) if axis == "domain_distance" else int(v) for v in str(settings["values"]).split(","))
    except ValueError:
        raise CliConfigError(f"bad --values list {settings['values']!r}")
    algos = tuple(str(settings["algos"]).split(","))
    for a in algos:
        if a not in harness.ALGORITHMS:
            raise CliConfigError(f"unknown algorithm {a!r}")
    base_spec = _spec_from(settings)
    try:
        sweep = harness.SweepConfig(axis=axis, values=values, base_spec=base_spec, algorithms=algos)
    except ValueError as exc:
        raise CliConfigError(str(exc))
    cells = harness.run_sweep(
        sweep,
        n_trials=int(settings["trials"]),
        n_seeds=int(settings["n-seeds"]),
        strategy=harness.SelectionStrategy(settings["strategy"]),
        master_seed=int(settings["seed"]),
        workers=int(settings["workers"]),
    )
    out = Path(args.out)
    paths = harness.emit_report(cells, out)
    failed = [c for c in cells if c.error]
    emit("sweep", args.quiet, cells=len(cells), failed=len(failed), **{k: v for k, v in paths.items() if k != "raw"})
    return 1 if failed else 0


INTERP_DEFAULTS = {
    **DATASET_DEFAULTS,
    "dataset": "rotatedcloud",
    "counts": "5,7,9,11",
    "trials": 3,
    "n-seeds": 3,
    "strategy": "oracle_max_query",
    "workers": 1,
}


def cmd_interp_study(args) -> int:
    settings = resolve_settings(args, INTERP_DEFAULTS)
    try:
        counts = tuple(int(v) for v in str(settings["counts"]).split(","))
    except ValueError:
        raise CliConfigError(f"bad --counts list {settings['counts']!r}")
    base_spec = _spec_from(settings)
    cells = harness.run_interpolation_study(
        base_spec,
        counts,
        n_trials=int(settings["trials"]),
        n_seeds=int(settings["n-seeds"]),
        strategy=harness.SelectionStrategy(settings["strategy"]),
        master_seed=int(settings["seed"]),
        workers=int(settings["workers"]),
    )
    out = Path(args.out)
    paths = harness.emit_report(cells, out, name="interpolation")
    emit("interp-study", args.quiet, cells=len(cells), **{k: v for k, v in paths.items() if k != "raw"})
    return 0


BOUNDS_DEFAULTS = {
    "instances": 1000,
    "decomposition-pairs": 10000,
    "seed": 0,
    "workers": 1,
    "env-json": None,
}


def cmd_verify_bounds(args) -> int:
    settings = resolve_settings(args, BOUNDS_DEFAULTS)
    results = bounds.run_certification(
        instances=int(settings["instances"]),
        decomposition_pairs=int(settings["decomposition-pairs"]),
        seed=int(settings["seed"]),
        workers=int(settings["workers"]),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"results": [r.to_dict() for r in results], "all_passed": all(r.passed for r in results)}
    if settings.get("env-json"):
        env_path = Path(settings["env-json"])
        if not env_path.exists():
            raise CliConfigError(f"environment file not found: {env_path}")
        try:
            env = bounds.env_from_dict(json.loads(env_path.read_text()))
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise CliConfigError(f"bad environment file {env_path}: {exc}")
        env_slacks = [s.to_dict() for s in bounds.certify_env(env)]
        report["environment"] = {"path": str(env_path), "slacks": env_slacks}
        report["all_passed"] = report["all_passed"] and all(
            s["slack"] >= -bounds.SLACK_TOL for s in env_slacks
        )
    json_path = out / "slack_report.json"
    json_path.write_text(json.dumps(report, sort_keys=True, indent=1))
    lines = ["| check | instances | min slack | status |", "|---|---|---|---|"]
    for r in results:
        lines.append(
            f"| {r.name} | {r.instances} | {r.min_slack:.3e} | {'pass' if r.passed else 'FAIL'} |"
        )
    md_path = out / "slack_summary.md"
    md_path.write_text("\n".join(lines) + "\n")
    for r in results:
        emit("bound-check", args.quiet, name=r.name, min_slack=r.min_slack, passed=r.passed)
    emit("verify-bounds", args.quiet, report=str(json_path), summary=str(md_path), all_passed=report["all_passed"])
    return 0 if report["all_passed"] else 1


REPORT_DEFAULTS = {"raw": None}


def cmd_report(args) -> int:
    settings = resolve_settings(args, REPORT_DEFAULTS)
    raw_dir = settings.get("raw")
    if not raw_dir or not Path(raw_dir).is_dir():
        raise CliConfigError(f"--raw must name a directory of per-cell JSON files, got {raw_dir!r}")
    cells = []
    for path in sorted(Path(raw_dir).glob("*.json")):
        payload = json.loads(path.read_text())
        per_seed = tuple(payload["per_seed"])
        if per_seed:
            mean = float(np.mean(per_seed))
            std = float(np.std(per_seed, ddof=1)) if len(per_seed) > 1 else 0.0
            if payload["mean"] is not None and (
                abs(mean - payload["mean"]) > 1e-12 or abs(std - (payload["std"] or 0.0)) > 1e-12
            ):
                emit("report-mismatch", args.quiet, file=str(path))
                return 1
        cells.append(
            harness.CellResult(
                row=payload["row"],
                algorithm=payload["algorithm"],
                mean=payload["mean"],
                std=payload["std"],
                per_seed=per_seed,
                scheme=payload["scheme"],
                error=payload.get("error"),
            )
        )
    if not cells:
        raise CliConfigError(f"no raw cell files under {raw_dir}")
    paths = harness.emit_report(cells, Path(args.out))
    emit("report", args.quiet, cells=len(cells), **{k: v for k, v in paths.items() if k != "raw"})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edg-lab",
        description="Evolving-domain-generalization workbench: data, training, sweeps, bound certification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate (or ingest) a dataset and cache it")
    p.add_argument("--dataset", choices=data.KINDS, default=None)
    p.add_argument("--num-domains", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--images", default=None, help="IDX image file (rmnist)")
    p.add_argument("--labels", default=None, help="IDX label file (rmnist)")
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one algorithm on one dataset")
    p.add_argument("--algo", default=None, help=f"one of {', '.join(harness.ALGORITHMS)}")
    p.add_argument("--dataset", choices=data.KINDS, default=None)
    p.add_argument("--num-domains", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--images", default=None)
    p.add_argument("--labels", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--hidden", default=None, help="comma-separated hidden widths (classifier)")
    p.add_argument("--embed", default=None, help="comma-separated encoder widths")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a dataset's target domain")
    p.add_argument("--checkpoint", default=None, required=False)
    p.add_argument("--dataset", choices=data.KINDS, default=None)
    p.add_argument("--num-domains", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--images", default=None)
    p.add_argument("--labels", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="axis sweep (domain distance or count) over algorithms")
    p.add_argument("--dataset", choices=data.KINDS, default=None)
    p.add_argument("--axis", choices=("distance", "count"), default=None)
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--algos", default=None, help="comma-separated algorithm ids")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--strategy", choices=[s.value for s in harness.SelectionStrategy], default=None)
    p.add_argument("--num-domains", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--distance", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("interp-study", help="extrapolation vs interpolation across domain counts")
    p.add_argument("--dataset", choices=data.KINDS, default=None)
    p.add_argument("--counts", default=None, help="comma-separated domain counts")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--n-seeds", type=int, default=None)
    p.add_argument("--strategy", choices=[s.value for s in harness.SelectionStrategy], default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--distance", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_interp_study)

    p = sub.add_parser("verify-bounds", help="randomized certification of the divergence bounds")
    p.add_argument("--instances", type=int, default=None)
    p.add_argument("--decomposition-pairs", type=int, default=None)
    p.add_argument("--env-json", default=None, help="also certify one serialized environment")
    _add_common(p)
    p.set_defaults(func=cmd_verify_bounds)

    p = sub.add_parser("report", help="re-emit tables from raw per-cell JSON")
    p.add_argument("--raw", default=None, help="directory holding raw/*.json cells")
    _add_common(p)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except CliConfigError as exc:
        emit("config-error", getattr(args, "quiet", False), message=str(exc))
        return 2
    except (data.IngestionError, FileNotFoundError) as exc:
        emit("input-error", getattr(args, "quiet", False), message=str(exc))
        return 2
    except RuntimeError as exc:
        emit("experiment-error", getattr(args, "quiet", False), message=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
