"""Experiment orchestration: random hyperparameter search over multi-seed
trials, axis sweeps, the interpolation/extrapolation study, and report
emission. Determinism comes from hashed child seeds, never from execution
order, so any worker count reproduces identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import baselines, data, dpnet
from .data import DomainData, EnvironmentSpec
from .nn import OptimizerError
from .seeding import child_rng, child_seed

log = logging.getLogger("edglab")

VAL_RATIO = 0.8

ALGORITHMS = (
    "dpnets",
    "proto",
    "erm",
    "erm-1",
    "erm-2",
    "erm-3",
    "erm-scalar",
    "erm-onehot",
    "erm-outer",
)


class SelectionStrategy(str, Enum):
    TRAINING_DOMAIN_VALIDATION = "training_domain_validation"
    ORACLE_MAX_QUERY = "oracle_max_query"


def evaluate_accuracy(predict_fn, domain: DomainData) -> float:
    """Fraction of the domain's samples whose prediction matches the label."""
    preds = np.asarray(predict_fn(domain.x))
    return float(np.mean(preds == domain.y))


@dataclass(frozen=True)
class HParamSpace:
    """Sampling laws for one random-search trial."""

    lr_range: tuple[float, float] = (1e-4, 1e-1)
    steps_choices: tuple[int, ...] = (500, 1000, 2000)
    batch_choices: tuple[int, ...] = (8, 16, 32)  # per class for episodic methods
    embed_choices: tuple[tuple[int, ...], ...] = ((2,),)  # encoder widths after input
    hidden_choices: tuple[tuple[int, ...], ...] = ((),)  # classifier hidden widths

    def sample(self, rng: np.random.Generator) -> dict:
        lo, hi = np.log10(self.lr_range[0]), np.log10(self.lr_range[1])
        return {
            "lr": float(10.0 ** rng.uniform(lo, hi)),
            "steps": int(rng.choice(self.steps_choices)),
            "batch": int(rng.choice(self.batch_choices)),
            "embed": tuple(self.embed_choices[rng.integers(len(self.embed_choices))]),
            "hidden": tuple(self.hidden_choices[rng.integers(len(self.hidden_choices))]),
        }


def default_space(kind: str) -> HParamSpace:
    """2-D datasets keep every network a single linear layer; the image
    dataset searches small MLP backbones."""
    if kind == "rmnist":
        return HParamSpace(
            batch_choices=(8, 10, 16),
            embed_choices=((128,), (256, 128)),
            hidden_choices=((128,), (256, 128)),
        )
    return HParamSpace()


@dataclass
class RunOutcome:
    target_acc: float | None
    val_acc: float | None
    losses: list[float]
    error: str | None = None


@dataclass
class Trial:
    """One hyperparameter draw evaluated over several seeds."""

    algorithm: str
    hparams: dict
    seeds: tuple[int, ...]
    target_accs: tuple[float, ...] = ()
    val_accs: tuple[float | None, ...] = ()
    loss_traces: tuple[tuple[float, ...], ...] = ()
    error: str | None = None

    @property
    def mean_target(self) -> float:
        return float(np.mean(self.target_accs))

    @property
    def mean_val(self) -> float:
        vals = [v for v in self.val_accs if v is not None]
        return float(np.mean(vals)) if vals else float("nan")


def _erm_variant(algorithm: str) -> tuple[baselines.IndexMode, int | None]:
    mode = baselines.IndexMode.NONE
    last_k = None
    if algorithm.startswith("erm-"):
        tag = algorithm.split("-", 1)[1]
        if tag.isdigit():
            last_k = int(tag)
        else:
            mode = {
                "scalar": baselines.IndexMode.SCALAR_CONCAT,
                "onehot": baselines.IndexMode.ONE_HOT_CONCAT,
                "outer": baselines.IndexMode.OUTER_PRODUCT,
            }[tag]
    return mode, last_k


def run_single(
    algorithm: str,
    train_sources: list[DomainData],
    val_sources: list[DomainData] | None,
    target: DomainData,
    hparams: dict,
    seed: int,
) -> RunOutcome:
    """Train one model and score it on the target (and validation when given).

    Optimizer blow-ups are recorded, not raised; the surrounding trial is then
    excluded from selection.
    """
    try:
        if algorithm in ("dpnets", "proto"):
            dims = (train_sources[0].dim,) + tuple(hparams["embed"])
            cfg = dpnet.TrainConfig(
                steps=hparams["steps"], n_per_class=hparams["batch"], lr=hparams["lr"], seed=seed
            )
            if algorithm == "dpnets":
                model = dpnet.init_dpnet(dims, train_sources[0].num_classes, seed)
                model, trace = dpnet.train(model, train_sources, cfg)
            else:
                model, trace = baselines.train_proto_vanilla(train_sources, cfg, dims)
            target_acc = evaluate_accuracy(
                lambda x: dpnet.predict_target(model, train_sources[-1], x), target
            )
            val_acc = None
            if val_sources is not None:
                accs = []
                for i in range(len(val_sources)):
                    sup = train_sources[i] if algorithm == "proto" else (train_sources[i - 1] if i > 0 else None)
                    if sup is None:
                        continue
                    accs.append(
                        evaluate_accuracy(lambda x: dpnet.predict_target(model, sup, x), val_sources[i])
                    )
                val_acc = float(np.mean(accs))
            return RunOutcome(target_acc, val_acc, [t.loss for t in trace])

        mode, last_k = _erm_variant(algorithm)
        cfg = baselines.ErmConfig(
            steps=hparams["steps"],
            batch_size=hparams["batch"] * train_sources[0].num_classes,
            lr=hparams["lr"],
            seed=seed,
            hidden=tuple(hparams["hidden"]),
        )
        model = baselines.train_erm(train_sources, cfg, index_mode=mode, last_k=last_k)
        target_acc = evaluate_accuracy(lambda x: baselines.predict_erm(model, x), target)
        val_acc = None
        if val_sources is not None:
            accs = [
                evaluate_accuracy(lambda x, i=v.index: baselines.predict_erm(model, x, i), v)
                for v in val_sources
            ]
            val_acc = float(np.mean(accs))
        return RunOutcome(target_acc, val_acc, [])
    except (OptimizerError, ValueError) as exc:
        # Diverged optimizers and infeasible draws (e.g. a per-class batch
        # larger than the domain provides) fail the run, not the search.
        log.warning("run failed: algo=%s seed=%d: %s", algorithm, seed, exc)
        return RunOutcome(None, None, [], error=str(exc))


@dataclass
class SearchResult:
    algorithm: str
    strategy: SelectionStrategy
    trials: list[Trial]
    best_index: int
    mean: float
    std: float

    @property
    def best(self) -> Trial:
        return self.trials[self.best_index]


def random_search(
    space: HParamSpace,
    algorithm: str,
    domains: list[DomainData],
    n_trials: int = 20,
    n_seeds: int = 5,
    strategy: SelectionStrategy = SelectionStrategy.ORACLE_MAX_QUERY,
    master_seed: int = 0,
    workers: int = 1,
) -> SearchResult:
    """Hyperparameter search: n_trials draws × n_seeds runs each, selected per
    strategy. Fully deterministic given master_seed, whatever the worker count."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r} (expected one of {ALGORITHMS})")
    target = domains[-1]
    sources = domains[:-1]
    if strategy is SelectionStrategy.TRAINING_DOMAIN_VALIDATION:
        split_seed = child_seed(master_seed, "valsplit")
        pairs = [data.split_train_val(d, VAL_RATIO, split_seed) for d in sources]
        train_sources = [p[0] for p in pairs]
        val_sources = [p[1] for p in pairs]
    else:
        train_sources, val_sources = sources, None

    hparams = [space.sample(child_rng(master_seed, "hp", t)) for t in range(n_trials)]
    seeds = {
        (t, s): child_seed(master_seed, "run", t, s) for t in range(n_trials) for s in range(n_seeds)
    }
    jobs = sorted(seeds)

    def run_job(key):
        t, s = key
        return key, run_single(algorithm, train_sources, val_sources, target, hparams[t], seeds[key])

    if workers <= 1:
        outcomes = dict(run_job(k) for k in jobs)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = dict(pool.map(run_job, jobs))

    trials: list[Trial] = []
    for t in range(n_trials):
        per_seed = [outcomes[(t, s)] for s in range(n_seeds)]
        errors = [o.error for o in per_seed if o.error]
        trials.append(
            Trial(
                algorithm=algorithm,
                hparams=hparams[t],
                seeds=tuple(seeds[(t, s)] for s in range(n_seeds)),
                target_accs=tuple(o.target_acc for o in per_seed if o.error is None),
                val_accs=tuple(o.val_acc for o in per_seed if o.error is None),
                loss_traces=tuple(tuple(o.losses) for o in per_seed if o.error is None),
                error="; ".join(errors) if errors else None,
            )
        )
    completed = [(i, tr) for i, tr in enumerate(trials) if tr.error is None]
    if not completed:
        raise RuntimeError(f"every trial failed for algorithm {algorithm!r}")
    if strategy is SelectionStrategy.TRAINING_DOMAIN_VALIDATION:
        best_index = max(completed, key=lambda it: (it[1].mean_val, -it[0]))[0]
    else:
        best_index = max(completed, key=lambda it: (it[1].mean_target, -it[0]))[0]
    accs = np.asarray(trials[best_index].target_accs)
    std = float(np.std(accs, ddof=1)) if accs.size > 1 else 0.0
    return SearchResult(
        algorithm=algorithm,
        strategy=strategy,
        trials=trials,
        best_index=best_index,
        mean=float(accs.mean()),
        std=std,
    )


# ---------------------------------------------------------------------------
# Sweeps and studies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepConfig:
    """Grid over one environment axis × a set of algorithms."""

    axis: str  # "domain_count" | "domain_distance"
    values: tuple
    base_spec: EnvironmentSpec
    algorithms: tuple[str, ...]

    def __post_init__(self):
        if self.axis not in ("domain_count", "domain_distance"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if len(self.values) < 2:
            raise ValueError("a sweep needs at least two axis values")

    def spec_for(self, value) -> EnvironmentSpec:
        if self.axis == "domain_count":
            return replace(self.base_spec, num_domains=int(value))
        return replace(self.base_spec, domain_distance=float(value))


@dataclass
class CellResult:
    row: str
    algorithm: str
    mean: float | None
    std: float | None
    per_seed: tuple[float, ...]
    scheme: str
    error: str | None = None


def run_sweep(
    sweep: SweepConfig,
    space: HParamSpace | None = None,
    n_trials: int = 20,
    n_seeds: int = 5,
    strategy: SelectionStrategy = SelectionStrategy.ORACLE_MAX_QUERY,
    master_seed: int = 0,
    workers: int = 1,
) -> list[CellResult]:
    """One random_search per (axis value, algorithm) cell; failed cells are
    marked and surfaced rather than aborting the grid."""
    space = space or default_space(sweep.base_spec.kind)
    cells: list[CellResult] = []
    for value in sweep.values:
        spec = sweep.spec_for(value)
        domains = data.generate(spec)
        for algorithm in sweep.algorithms:
            cell_seed = child_seed(master_seed, sweep.axis, value, algorithm)
            row = f"{sweep.axis}={value}"
            try:
                res = random_search(
                    space,
                    algorithm,
                    domains,
                    n_trials=n_trials,
                    n_seeds=n_seeds,
                    strategy=strategy,
                    master_seed=cell_seed,
                    workers=workers,
                )
                cells.append(
                    CellResult(row, algorithm, res.mean, res.std, tuple(res.best.target_accs), strategy.value)
                )
            except RuntimeError as exc:
                log.warning("sweep cell failed: %s %s: %s", row, algorithm, exc)
                cells.append(CellResult(row, algorithm, None, None, (), strategy.value, error=str(exc)))
    return cells


def middle_index(num_domains: int) -> int:
    """Middle target position; even counts take the lower median."""
    return (num_domains - 1) // 2


def run_interpolation_study(
    base_spec: EnvironmentSpec,
    domain_counts: tuple[int, ...],
    space: HParamSpace | None = None,
    n_trials: int = 3,
    n_seeds: int = 3,
    strategy: SelectionStrategy = SelectionStrategy.ORACLE_MAX_QUERY,
    master_seed: int = 0,
    workers: int = 1,
) -> list[CellResult]:
    """Three curves over domain count: the episodic method and plain ERM with
    the target at the far edge, plus ERM with the middle domain held out."""
    space = space or default_space(base_spec.kind)
    cells: list[CellResult] = []
    for count in domain_counts:
        spec = replace(base_spec, num_domains=int(count))
        domains = data.generate(spec)
        mid = middle_index(len(domains))
        interp_order = [d for i, d in enumerate(domains) if i != mid] + [domains[mid]]
        settings = (
            ("dpnets-extrapolation", "dpnets", domains),
            ("erm-extrapolation", "erm", domains),
            ("erm-interpolation", "erm", interp_order),
        )
        for label, algorithm, ordered in settings:
            cell_seed = child_seed(master_seed, "interp", count, label)
            res = random_search(
                space,
                algorithm,
                ordered,
                n_trials=n_trials,
                n_seeds=n_seeds,
                strategy=strategy,
                master_seed=cell_seed,
                workers=workers,
            )
            cells.append(
                CellResult(f"domains={count}", label, res.mean, res.std, tuple(res.best.target_accs), strategy.value)
            )
    return cells


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def format_mean_std(mean: float, std: float) -> str:
    """Accuracy as percent, one decimal: the table style of the comparisons."""
    return f"{100.0 * mean:.1f} ± {100.0 * std:.1f}"


def _row_key(row: str):
    """Natural ordering for 'axis=value' rows: numeric suffixes sort numerically."""
    if "=" in row:
        prefix, _, suffix = row.rpartition("=")
        try:
            return (prefix, 0, float(suffix), "")
        except ValueError:
            return (prefix, 1, 0.0, suffix)
    return (row, 1, 0.0, "")


def render_csv(cells: list[CellResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["row", "algorithm", "mean", "std", "n_seeds", "scheme", "error"])
    for c in sorted(cells, key=lambda c: (_row_key(c.row), c.algorithm)):
        writer.writerow(
            [
                c.row,
                c.algorithm,
                "" if c.mean is None else repr(c.mean),
                "" if c.std is None else repr(c.std),
                len(c.per_seed),
                c.scheme,
                c.error or "",
            ]
        )
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        r["mean"] = float(r["mean"]) if r["mean"] else None
        r["std"] = float(r["std"]) if r["std"] else None
        r["n_seeds"] = int(r["n_seeds"])
    return rows


def render_markdown(cells: list[CellResult]) -> str:
    """Algorithms as rows, cells as columns, best mean per column bolded."""
    columns = sorted({c.row for c in cells}, key=_row_key)
    algos = sorted({c.algorithm for c in cells})
    lookup = {(c.algorithm, c.row): c for c in cells}
    best: dict[str, float] = {}
    for col in columns:
        means = [lookup[(a, col)].mean for a in algos if (a, col) in lookup and lookup[(a, col)].mean is not None]
        if means:
            best[col] = max(means)
    lines = ["| Algorithm | " + " | ".join(columns) + " |", "|---" * (len(columns) + 1) + "|"]
    for a in algos:
        row = [a]
        for col in columns:
            c = lookup.get((a, col))
            if c is None or c.mean is None:
                row.append("failed" if c is not None else "")
                continue
            text = format_mean_std(c.mean, c.std or 0.0)
            row.append(f"**{text}**" if c.mean == best.get(col) else text)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def emit_report(cells: list[CellResult], out_dir, name: str = "results") -> dict:
    """Write <name>.csv, <name>.md and raw/<cell>.json; returns the paths."""
    out = Path(out_dir)
    raw_dir = out / "raw"
    try:
        raw_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{name}.csv"
        md_path = out / f"{name}.md"
        csv_path.write_text(render_csv(cells))
        md_path.write_text(render_markdown(cells))
        raw_paths = []
        for c in sorted(cells, key=lambda c: (_row_key(c.row), c.algorithm)):
            safe = f"{c.row}__{c.algorithm}".replace("=", "-").replace("/", "-")
            path = raw_dir / f"{safe}.json"
            path.write_text(
                json.dumps(
                    {
                        "row": c.row,
                        "algorithm": c.algorithm,
                        "mean": c.mean,
                        "std": c.std,
                        "per_seed": list(c.per_seed),
                        "scheme": c.scheme,
                        "error": c.error,
                    },
                    sort_keys=True,
                    indent=1,
                )
            )
            raw_paths.append(str(path))
    except OSError as exc:
        raise RuntimeError(f"cannot write report under {out_dir}: {exc}") from exc
    return {"csv": str(csv_path), "md": str(md_path), "raw": raw_paths}
