"""Exact finite-distribution laboratory for divergence-based risk bounds.

Everything here works on exact discrete joint distributions over a finite
feature set X and label set Y, so every divergence, risk and bound can be
evaluated to float precision and each inequality certified by its slack
(bound minus the quantity it dominates; non-negative up to rounding).

Divergences are in nats. Conventions: 0·log 0 = 0; conditionals of zero-mass
labels are excluded from expectations.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .seeding import child_rng

Array = np.ndarray

SLACK_TOL = 1e-9


class AbsoluteContinuityError(ValueError):
    """KL(P||Q) requested where Q puts zero mass on part of P's support."""


def _as_dist(p) -> Array:
    arr = np.asarray(p.p if isinstance(p, DiscreteJoint) else p, dtype=np.float64).ravel()
    if np.any(arr < 0.0):
        raise ValueError("negative probability mass")
    if abs(arr.sum() - 1.0) > 1e-9:
        raise ValueError(f"distribution sums to {arr.sum()!r}, not 1")
    return arr


def kl(p, q) -> float:
    """Kullback-Leibler divergence (nats) between same-support distributions."""
    pa, qa = _as_dist(p), _as_dist(q)
    if pa.shape != qa.shape:
        raise ValueError(f"support size mismatch: {pa.shape} vs {qa.shape}")
    mask = pa > 0.0
    if np.any(qa[mask] == 0.0):
        raise AbsoluteContinuityError("Q is zero on part of P's support")
    return float(np.sum(pa[mask] * np.log(pa[mask] / qa[mask])))


def js(p, q) -> float:
    """Jensen-Shannon divergence: 0.5 KL(P||M) + 0.5 KL(Q||M), M the mixture.

    Always finite; 0 iff P = Q; at most ln 2 (attained on disjoint supports).
    """
    pa, qa = _as_dist(p), _as_dist(q)
    if pa.shape != qa.shape:
        raise ValueError(f"support size mismatch: {pa.shape} vs {qa.shape}")
    m = 0.5 * (pa + qa)
    return 0.5 * kl(pa, m) + 0.5 * kl(qa, m)


@dataclass(frozen=True)
class DiscreteJoint:
    """Exact joint distribution p[x, y] over nx feature values and ny labels."""

    p: Array

    def __post_init__(self):
        arr = np.ascontiguousarray(self.p, dtype=np.float64)
        object.__setattr__(self, "p", arr)
        if arr.ndim != 2:
            raise ValueError("joint must be an nx × ny matrix")
        if np.any(arr < 0.0):
            raise ValueError("negative probability mass")
        if abs(arr.sum() - 1.0) > 1e-12:
            raise ValueError(f"mass sums to {arr.sum()!r}, not 1")

    @property
    def nx(self) -> int:
        return self.p.shape[0]

    @property
    def ny(self) -> int:
        return self.p.shape[1]

    def marginal_y(self) -> Array:
        return self.p.sum(axis=0)

    def conditional_x_given_y(self, y: int) -> Array:
        mass = self.p[:, y].sum()
        if mass <= 0.0:
            raise ValueError(f"label {y} has zero mass")
        return self.p[:, y] / mass


@dataclass(frozen=True)
class MappingFn:
    """Deterministic feature map X -> X as a lookup table."""

    table: Array

    def __post_init__(self):
        t = np.ascontiguousarray(self.table, dtype=np.int64)
        object.__setattr__(self, "table", t)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("map table must be a non-empty vector")
        if t.min() < 0 or t.max() >= t.size:
            raise ValueError("map table must be total on X")


def apply_map(d: DiscreteJoint, g: MappingFn) -> DiscreteJoint:
    """Pushforward on features, labels untouched: p'[x', y] = sum_{g(x)=x'} p[x, y]."""
    if g.table.size != d.nx:
        raise ValueError(f"map over {g.table.size} points, joint has nx={d.nx}")
    out = np.zeros_like(d.p)
    np.add.at(out, g.table, d.p)
    return DiscreteJoint(out)


@dataclass(frozen=True)
class DiscreteEnv:
    """Ordered domains (m sources then one target) plus candidate feature maps."""

    domains: tuple[DiscreteJoint, ...]
    candidate_maps: tuple[MappingFn, ...]

    def __post_init__(self):
        if len(self.domains) < 3:
            raise ValueError("need at least two sources and a target")
        nx, ny = self.domains[0].nx, self.domains[0].ny
        for d in self.domains:
            if (d.nx, d.ny) != (nx, ny):
                raise ValueError("all domains must share nx and ny")

    @property
    def num_sources(self) -> int:
        return len(self.domains) - 1

    @property
    def sources(self) -> tuple[DiscreteJoint, ...]:
        return self.domains[:-1]

    @property
    def target(self) -> DiscreteJoint:
        return self.domains[-1]


@dataclass(frozen=True)
class LossSpec:
    """Deterministic classifier table plus a bounded loss matrix loss[pred, true]."""

    classifier: Array  # X -> Y
    loss: Array  # ny × ny

    def __post_init__(self):
        c = np.ascontiguousarray(self.classifier, dtype=np.int64)
        l = np.ascontiguousarray(self.loss, dtype=np.float64)
        object.__setattr__(self, "classifier", c)
        object.__setattr__(self, "loss", l)
        if l.ndim != 2 or l.shape[0] != l.shape[1]:
            raise ValueError("loss must be a square ny × ny matrix")
        if not np.all(np.isfinite(l)):
            raise ValueError("loss values must be finite")
        if c.min() < 0 or c.max() >= l.shape[0]:
            raise ValueError("classifier outputs outside the label set")

    @property
    def g_range(self) -> float:
        return float(self.loss.max() - self.loss.min())


def risk(h_spec: LossSpec, d: DiscreteJoint) -> float:
    """Expected loss of the classifier under the joint: sum p[x,y] loss[h(x), y]."""
    if h_spec.classifier.size != d.nx:
        raise ValueError("classifier not total on X")
    return float(np.sum(d.p * h_spec.loss[h_spec.classifier, :]))


# ---------------------------------------------------------------------------
# Consistency of a drift map over an environment
# ---------------------------------------------------------------------------


def source_pair_divergences(env: DiscreteEnv, g: MappingFn) -> Array:
    """d_JS(g(D_{i-1}) || D_i) for every consecutive source pair (m-1 values)."""
    src = env.sources
    return np.array([js(apply_map(src[j - 1], g), src[j]) for j in range(1, len(src))])


def target_divergence(env: DiscreteEnv, g: MappingFn) -> float:
    """d_JS(g(D_m) || D_t): divergence of the synthetic target from the real one."""
    return js(apply_map(env.sources[-1], g), env.target)


def consistency_gap(divergences: Array) -> float:
    """Largest pairwise gap between per-pair divergences."""
    d = np.asarray(divergences, dtype=np.float64)
    return float(d.max() - d.min()) if d.size else 0.0


@dataclass(frozen=True)
class ConsistencyReport:
    """Minimax drift map with its per-pair source divergences and their gap."""

    map: MappingFn
    divergences: tuple[float, ...]
    gap: float  # max pairwise spread over source pairs (the observable gap)

    def __post_init__(self):
        if self.gap < 0:
            raise ValueError("gap must be non-negative")


def find_minimax_map(env: DiscreteEnv) -> ConsistencyReport:
    """Candidate map minimizing the worst consecutive-pair source divergence.

    Ties break toward the earliest candidate. The reported gap covers source
    pairs only; verifiers that need the target pair compute it separately.
    """
    if not env.candidate_maps:
        raise ValueError("candidate map family is empty")
    best = None
    for g in env.candidate_maps:
        divs = source_pair_divergences(env, g)
        worst = divs.max()
        if best is None or worst < best[0]:
            best = (worst, g, divs)
    _, g_star, divs = best
    return ConsistencyReport(map=g_star, divergences=tuple(float(v) for v in divs), gap=consistency_gap(divs))


def gap_with_target(env: DiscreteEnv, report: ConsistencyReport) -> float:
    """Pairwise-divergence gap including the (unobservable) target pair."""
    all_divs = np.append(np.asarray(report.divergences), target_divergence(env, report.map))
    return consistency_gap(all_divs)


# ---------------------------------------------------------------------------
# Bound verifiers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SlackReport:
    name: str
    bound: float
    target_risk: float
    details: dict = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.bound - self.target_risk

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "bound": self.bound,
            "target_risk": self.target_risk,
            "slack": self.slack,
            **self.details,
        }


def transfer_penalty(g_range: float, divergence: float) -> float:
    """Worst extra risk a G-range loss can pick up across a JS gap: sqrt(2)·G·sqrt(d).

    The change-of-measure route (sub-Gaussian parameter G/2, optimized
    tilting) gives exactly this constant, and no smaller one works: disjoint
    supports with a 0-1 loss realize a risk gap of G at d = ln 2.
    """
    return float(np.sqrt(2.0) * g_range * np.sqrt(max(divergence, 0.0)))


def verify_synthetic_transfer_bound(env: DiscreteEnv, g: MappingFn, h_spec: LossSpec) -> SlackReport:
    """Single-pair bound: risk on the real target is at most the risk on the
    synthetic target g(D_m) plus the JS transfer penalty of their gap."""
    synthetic = apply_map(env.sources[-1], g)
    div = js(synthetic, env.target)
    bound = risk(h_spec, synthetic) + transfer_penalty(h_spec.g_range, div)
    return SlackReport(
        name="synthetic_transfer",
        bound=float(bound),
        target_risk=risk(h_spec, env.target),
        details={"target_pair_js": float(div)},
    )


def sequential_bound_value(env: DiscreteEnv, report: ConsistencyReport, h_spec: LossSpec, gap_full: float) -> float:
    """Multi-domain bound value: synthetic-target risk plus the averaged
    source-divergence term and the consistency-gap term.

    The target-pair divergence is at most mean(source divergences) + gap, and
    sqrt(a+b) <= sqrt(a)+sqrt(b), so with the transfer penalty this yields the
    coefficient sqrt(2/(m-1))·G on (sqrt(sum d_i) + sqrt((m-1)·gap)).
    """
    m = env.num_sources
    synthetic = apply_map(env.sources[-1], report.map)
    divs = np.asarray(report.divergences)
    coeff = h_spec.g_range * np.sqrt(2.0 / (m - 1))
    return float(risk(h_spec, synthetic) + coeff * (np.sqrt(divs.sum()) + np.sqrt((m - 1) * gap_full)))


def verify_sequential_transfer_bound(env: DiscreteEnv, report: ConsistencyReport, h_spec: LossSpec) -> SlackReport:
    """Bound the target risk using only consecutive-pair source divergences
    plus the pairwise gap. Uses the gap including the target pair, so its
    premise holds by construction and the slack must be non-negative."""
    gap_full = gap_with_target(env, report)
    bound = sequential_bound_value(env, report, h_spec, gap_full)
    return SlackReport(
        name="sequential_transfer",
        bound=bound,
        target_risk=risk(h_spec, env.target),
        details={"gap_source": report.gap, "gap_full": gap_full},
    )


def js_decomposition_gap(p: DiscreteJoint, q: DiscreteJoint) -> float:
    """RHS minus LHS of the joint-JS decomposition into a label-marginal term
    plus both label-weighted conditional expectations. Non-negative."""
    if (p.nx, p.ny) != (q.nx, q.ny):
        raise ValueError("joints must share support")
    lhs = js(p, q)
    rhs = js(p.marginal_y(), q.marginal_y())
    py, qy = p.marginal_y(), q.marginal_y()
    for weights in (py, qy):
        for y in range(p.ny):
            if weights[y] <= 0.0:
                continue
            cond_div = _conditional_js(p, q, y)
            rhs += weights[y] * cond_div
    return float(rhs - lhs)


def _conditional_js(p: DiscreteJoint, q: DiscreteJoint, y: int) -> float:
    """JS between the two x|y conditionals. A label with zero mass on either
    side contributes 0: the matching chain-rule term is exactly 0 there, so
    the decomposition inequality survives the exclusion."""
    pmass, qmass = p.p[:, y].sum(), q.p[:, y].sum()
    if pmass <= 0.0 or qmass <= 0.0:
        return 0.0
    return js(p.p[:, y] / pmass, q.p[:, y] / qmass)


def decomposed_terms(p: DiscreteJoint, q: DiscreteJoint) -> tuple[float, float, float]:
    """(label-marginal JS, E_{y~p(y)} cond-JS, E_{y~q(y)} cond-JS) for one pair."""
    t1 = js(p.marginal_y(), q.marginal_y())
    py, qy = p.marginal_y(), q.marginal_y()
    t2 = sum(py[y] * _conditional_js(p, q, y) for y in range(p.ny) if py[y] > 0)
    t3 = sum(qy[y] * _conditional_js(p, q, y) for y in range(p.ny) if qy[y] > 0)
    return float(t1), float(t2), float(t3)


def verify_decomposed_transfer_bound(env: DiscreteEnv, report: ConsistencyReport, h_spec: LossSpec) -> SlackReport:
    """Relaxation of the sequential bound: each pair divergence is replaced by
    its label-marginal + conditional decomposition. Checks both that the bound
    dominates the target risk and that it dominates the tighter bound."""
    m = env.num_sources
    src = env.sources
    t1s, t2s, t3s = [], [], []
    for j in range(1, len(src)):
        p = apply_map(src[j - 1], report.map)
        t1, t2, t3 = decomposed_terms(p, src[j])
        t1s.append(t1)
        t2s.append(t2)
        t3s.append(t3)
    gap_full = gap_with_target(env, report)
    synthetic = apply_map(src[-1], report.map)
    coeff = h_spec.g_range * np.sqrt(2.0 / (m - 1))
    bound = float(
        risk(h_spec, synthetic)
        + coeff
        * (
            np.sqrt(np.sum(t1s))
            + np.sqrt((m - 1) * gap_full)
            + np.sqrt(np.sum(t2s))
            + np.sqrt(np.sum(t3s))
        )
    )
    tighter = sequential_bound_value(env, report, h_spec, gap_full)
    return SlackReport(
        name="decomposed_transfer",
        bound=bound,
        target_risk=risk(h_spec, env.target),
        details={
            "label_terms": [float(v) for v in t1s],
            "tighter_bound": tighter,
            "relaxation_margin": bound - tighter,
        },
    )


def verify_change_of_measure(p, q, f: Array, lam: float) -> float:
    """Slack of the change-of-measure inequality
    lam (E_Q f - E_P f) <= KL(Q||P) + log E_P exp(lam (f - E_P f)).

    Returns the right side minus the left side (non-negative). The slack is
    invariant to adding constants to f; it vanishes at f = (1/lam) log(q/p)
    when P and Q are mutually absolutely continuous.
    """
    pa, qa = _as_dist(p), _as_dist(q)
    fa = np.asarray(f, dtype=np.float64).ravel()
    if pa.shape != qa.shape or fa.shape != pa.shape:
        raise ValueError("P, Q and f must share one support")
    div = kl(qa, pa)  # raises if Q is not absolutely continuous w.r.t. P
    ep_f = float(pa @ fa)
    centered = lam * (fa - ep_f)
    support = pa > 0
    shift = centered[support].max()
    log_mgf = shift + np.log(np.sum(pa[support] * np.exp(centered[support] - shift)))
    lhs = lam * (float(qa @ fa) - ep_f)
    return float(div + log_mgf - lhs)


def attainment_function(p, q, lam: float) -> Array:
    """The f that makes the change-of-measure inequality tight (up to an
    additive constant): (1/lam) log(q/p). Needs mutual absolute continuity."""
    pa, qa = _as_dist(p), _as_dist(q)
    if np.any(pa == 0.0) or np.any(qa == 0.0):
        raise AbsoluteContinuityError("attainment case needs strictly positive P and Q")
    if lam == 0.0:
        raise ValueError("lam must be nonzero")
    return np.log(qa / pa) / lam


# ---------------------------------------------------------------------------
# Environment (de)serialization
# ---------------------------------------------------------------------------


def env_to_dict(env: DiscreteEnv) -> dict:
    """JSON-ready form: support sizes, per-domain probability matrices, map tables."""
    return {
        "nx": env.domains[0].nx,
        "ny": env.domains[0].ny,
        "domains": [d.p.tolist() for d in env.domains],
        "candidate_maps": [g.table.tolist() for g in env.candidate_maps],
    }


def env_from_dict(payload: dict) -> DiscreteEnv:
    domains = tuple(DiscreteJoint(np.asarray(p, dtype=np.float64)) for p in payload["domains"])
    maps = tuple(MappingFn(np.asarray(t, dtype=np.int64)) for t in payload["candidate_maps"])
    env = DiscreteEnv(domains=domains, candidate_maps=maps)
    if (env.domains[0].nx, env.domains[0].ny) != (payload["nx"], payload["ny"]):
        raise ValueError("declared nx/ny do not match the domain matrices")
    return env


def certify_env(env: DiscreteEnv, h_spec: LossSpec | None = None) -> list[SlackReport]:
    """All three transfer-bound slacks for one concrete environment."""
    if h_spec is None:
        nx, ny = env.domains[0].nx, env.domains[0].ny
        # Default probe classifier: the target-optimal label per feature value.
        classifier = np.argmax(env.target.p, axis=1)
        h_spec = LossSpec(classifier=classifier, loss=1.0 - np.eye(ny))
    report = find_minimax_map(env)
    return [
        verify_synthetic_transfer_bound(env, report.map, h_spec),
        verify_sequential_transfer_bound(env, report, h_spec),
        verify_decomposed_transfer_bound(env, report, h_spec),
    ]


# ---------------------------------------------------------------------------
# Randomized certification
# ---------------------------------------------------------------------------


def random_joint(rng: np.random.Generator, nx: int, ny: int, strictly_positive: bool = False) -> DiscreteJoint:
    raw = rng.random((nx, ny))
    if strictly_positive:
        raw += 0.05
    else:
        raw[rng.random((nx, ny)) < 0.15] = 0.0
        if raw.sum() == 0.0:
            raw[0, 0] = 1.0
    return DiscreteJoint(raw / raw.sum())


def random_map(rng: np.random.Generator, nx: int) -> MappingFn:
    return MappingFn(rng.integers(0, nx, size=nx))


def random_loss_spec(rng: np.random.Generator, nx: int, ny: int) -> LossSpec:
    classifier = rng.integers(0, ny, size=nx)
    if rng.random() < 0.5:
        loss = 1.0 - np.eye(ny)
    else:
        loss = rng.random((ny, ny)) * float(rng.uniform(0.5, 3.0))
    return LossSpec(classifier=classifier, loss=loss)


def random_env(rng: np.random.Generator, nx: int, ny: int, m_sources: int, n_maps: int) -> DiscreteEnv:
    domains = tuple(random_joint(rng, nx, ny) for _ in range(m_sources + 1))
    maps = tuple(random_map(rng, nx) for _ in range(n_maps))
    return DiscreteEnv(domains=domains, candidate_maps=maps)


@dataclass
class CertificationResult:
    name: str
    instances: int
    min_slack: float
    max_abs_attainment: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        ok = self.min_slack >= -SLACK_TOL
        if self.max_abs_attainment is not None:
            ok = ok and self.max_abs_attainment <= SLACK_TOL
        return ok

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "instances": self.instances,
            "min_slack": self.min_slack,
            "passed": self.passed,
            **self.extras,
        }
        if self.max_abs_attainment is not None:
            out["max_abs_attainment"] = self.max_abs_attainment
        return out


def _instance_slacks(seed: int, index: int) -> dict:
    """All per-instance certification quantities for one random draw."""
    rng = child_rng(seed, "cert", index)
    nx = int(rng.integers(2, 7))
    ny = int(rng.integers(2, 4))
    m_sources = int(rng.integers(2, 5))
    env = random_env(rng, nx, ny, m_sources, n_maps=int(rng.integers(1, 17)))
    h_spec = random_loss_spec(rng, nx, ny)
    g = env.candidate_maps[0]
    report = find_minimax_map(env)
    single = verify_synthetic_transfer_bound(env, g, h_spec)
    seq = verify_sequential_transfer_bound(env, report, h_spec)
    dec = verify_decomposed_transfer_bound(env, report, h_spec)

    # Change of measure over strictly positive distributions on a flat support.
    size = int(rng.integers(2, 9))
    pv = rng.random(size) + 0.05
    pv /= pv.sum()
    qv = rng.random(size) + 0.05
    qv /= qv.sum()
    fv = rng.normal(size=size) * 2.0
    lam = float(rng.uniform(0.1, 2.0)) * (1.0 if rng.random() < 0.5 else -1.0)
    com = verify_change_of_measure(pv, qv, fv, lam)
    attain = verify_change_of_measure(pv, qv, attainment_function(pv, qv, lam), lam)
    return {
        "synthetic_transfer": single.slack,
        "sequential_transfer": seq.slack,
        "decomposed_transfer": dec.slack,
        "relaxation_margin": dec.details["relaxation_margin"],
        "change_of_measure": com,
        "attainment_abs": abs(attain),
    }


def run_certification(
    instances: int = 1000,
    decomposition_pairs: int = 10000,
    seed: int = 0,
    workers: int = 1,
) -> list[CertificationResult]:
    """Randomized certification of every inequality; deterministic per seed,
    independent of worker count (instances are keyed by index and reduced by min)."""

    def run_range(lo: int, hi: int) -> list[dict]:
        return [_instance_slacks(seed, i) for i in range(lo, hi)]

    if workers <= 1:
        rows = run_range(0, instances)
    else:
        step = (instances + workers - 1) // workers
        spans = [(i, min(i + step, instances)) for i in range(0, instances, step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(lambda span: run_range(*span), spans))
        rows = [row for chunk in chunks for row in chunk]

    def collect(key: str) -> float:
        return float(min(row[key] for row in rows))

    results = [
        CertificationResult("synthetic_transfer", instances, collect("synthetic_transfer")),
        CertificationResult("sequential_transfer", instances, collect("sequential_transfer")),
        CertificationResult(
            "decomposed_transfer",
            instances,
            collect("decomposed_transfer"),
            extras={"min_relaxation_margin": collect("relaxation_margin")},
        ),
        CertificationResult(
            "change_of_measure",
            instances,
            collect("change_of_measure"),
            max_abs_attainment=float(max(row["attainment_abs"] for row in rows)),
        ),
    ]

    gaps = []
    for i in range(decomposition_pairs):
        rng = child_rng(seed, "jsdec", i)
        nx = int(rng.integers(2, 7))
        ny = int(rng.integers(2, 4))
        gaps.append(js_decomposition_gap(random_joint(rng, nx, ny), random_joint(rng, nx, ny)))
    results.append(CertificationResult("js_decomposition", decomposition_pairs, float(min(gaps))))
    return results
