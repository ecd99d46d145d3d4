"""Experiment matrix, perturbation sweeps, salience traces and reports.

Run files written here are the single source for every table: ``report``
re-reads them and renders the same bytes each time.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .corpus import (
    Corpus,
    SyntheticConfig,
    generate_synthetic,
    load_corpus,
    perturb_add_noise,
    perturb_remove,
)
from .losses import METHODS, ConfigError
from .trainer import ALL_RATIONALE, CRUCIAL_RATIONALE, PIN_PLANTED, RunRecord, TrainConfig, derive_seed, train_run

log = logging.getLogger(__name__)

REMOVAL = "removal"
NOISE = "noise"
PERTURBATIONS = (REMOVAL, NOISE)
METRICS = ("accuracy", "f1")


@dataclass
class ExperimentSpec:
    """What to run.

    Either ``synthetic`` (keyword overrides for :class:`SyntheticConfig`) or
    all three of ``train_path``/``valid_path``/``test_path`` name the corpus.
    ``train`` and ``model`` hold overrides for the training and model
    configurations; ``method`` and ``lam`` there are ignored.
    """

    methods: Sequence[str] = ("none", "base", "order")
    lams: Sequence[float] = (1.0,)
    seeds: int = 5
    seed: int = 0
    reference: str = "base"
    synthetic: Optional[Dict] = None
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    test_path: Optional[str] = None
    removal: Sequence[float] = ()
    noise: Sequence[float] = ()
    train: Dict = field(default_factory=dict)
    model: Dict = field(default_factory=dict)
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.methods = [str(m) for m in self.methods]
        self.lams = [float(x) for x in self.lams]
        self.removal = [float(x) for x in self.removal]
        self.noise = [float(x) for x in self.noise]
        if not self.methods:
            raise ConfigError("methods: at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"methods: unknown method {m!r}; expected one of {', '.join(METHODS)}")
        if not self.lams:
            raise ConfigError("lams: at least one value is required")
        if any(x < 0 for x in self.lams):
            raise ConfigError("lams: must be >= 0")
        if self.seeds < 1:
            raise ConfigError(f"seeds: must be >= 1, got {self.seeds}")
        for name in ("removal", "noise"):
            for x in getattr(self, name):
                if not 0.0 <= x <= 1.0:
                    raise ConfigError(f"{name}: fractions must lie in [0, 1], got {x}")
        paths = [self.train_path, self.valid_path, self.test_path]
        if any(paths) and not all(paths):
            raise ConfigError("train_path/valid_path/test_path: give all three or none")
        if self.synthetic is not None and any(paths):
            raise ConfigError("synthetic: cannot be combined with corpus paths")
        if self.synthetic is not None:
            SyntheticConfig(**self.synthetic)
        bad = {"method", "lam", "seed"} & set(self.train)
        if bad:
            raise ConfigError(f"train: {sorted(bad)} are set per run, not in the spec")

    def load_corpora(self) -> Tuple[Corpus, Corpus, Corpus]:
        if self.train_path:
            return load_corpus(self.train_path), load_corpus(self.valid_path), load_corpus(self.test_path)
        cfg = SyntheticConfig(**{"seed": self.seed, **(self.synthetic or {})})
        train, valid, test, _ = generate_synthetic(cfg)
        return train, valid, test

    def lams_for(self, method: str) -> List[float]:
        # the lambda grid is meaningless without an auxiliary term
        return [0.0] if method == "none" else list(self.lams)


def _tag(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def run_seed(experiment_seed: int, method: str, lam: float, seed_index: int) -> int:
    """Deterministic per-run seed from the experiment seed and the run's coordinates."""
    return derive_seed(experiment_seed, _tag(method), _tag(repr(float(lam))), seed_index)


def perturbation_seed(experiment_seed: int, kind: str, fraction: float, seed_index: int) -> int:
    # shared by every method so all of them see the same perturbed masks
    return derive_seed(experiment_seed, _tag(kind), _tag(repr(float(fraction))), seed_index)


# ---------------------------------------------------------------------------
# statistics

@dataclass
class WelchResult:
    t: float
    df: float
    p: float


def welch_test(a: Sequence[float], b: Sequence[float]) -> Optional[WelchResult]:
    """Unpaired two-sided Welch t-test; ``None`` when it is not applicable.

    Not applicable means fewer than two samples on a side, or both samples
    constant with different means (the statistic is unbounded).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) < 2 or len(b) < 2:
        return None
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0 and vb == 0:
        if a.mean() == b.mean():
            return WelchResult(t=0.0, df=float(len(a) + len(b) - 2), p=1.0)
        return None
    res = stats.ttest_ind(a, b, equal_var=False)
    se2 = va / len(a) + vb / len(b)
    df = se2 ** 2 / ((va / len(a)) ** 2 / (len(a) - 1) + (vb / len(b)) ** 2 / (len(b) - 1))
    return WelchResult(t=float(res.statistic), df=float(df), p=float(min(1.0, res.pvalue)))


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


# ---------------------------------------------------------------------------
# running

@dataclass
class RunKey:
    method: str
    lam: float
    seed_index: int
    perturbation: str = "none"
    fraction: float = 0.0

    def filename(self) -> str:
        pert = "" if self.perturbation == "none" else f"_{self.perturbation}{self.fraction:g}"
        return f"{self.method}_lam{self.lam:g}{pert}_s{self.seed_index}.jsonl"


def _run_one(spec: ExperimentSpec, key: RunKey, corpora) -> RunRecord:
    train, valid, test = corpora
    cfg = TrainConfig(**{**spec.train, "method": key.method, "lam": key.lam if key.method != "none" else 1.0,
                         "seed": run_seed(spec.seed, key.method, key.lam, key.seed_index)})
    try:
        record, _, _ = train_run(train, valid, test, cfg, model_config=spec.model)
    except (FloatingPointError, ValueError) as exc:
        log.warning("run %s failed: %s", key, exc)
        record = RunRecord(seed=cfg.seed, config={"train": asdict(cfg), "model": dict(spec.model)}, status="failed")
        record.final["error"] = str(exc)
    record.config["experiment"] = {**asdict(key), "experiment_seed": spec.seed}
    if spec.out_dir:
        runs = Path(spec.out_dir) / "runs"
        runs.mkdir(parents=True, exist_ok=True)
        record.save(runs / key.filename())
    return record


def _perturbed(corpora, kind: str, fraction: float, rng_seed: int):
    train, valid, test = corpora
    if kind == "none" or fraction == 0.0:
        return corpora
    rng = np.random.default_rng(rng_seed)
    fn = perturb_remove if kind == REMOVAL else perturb_add_noise
    return fn(train, fraction, rng), valid, test


def run_keys(spec: ExperimentSpec, perturbation: str = "none", fraction: float = 0.0) -> List[RunKey]:
    return [RunKey(m, lam, i, perturbation, fraction)
            for m in spec.methods for lam in spec.lams_for(m) for i in range(spec.seeds)]


def run_matrix(spec: ExperimentSpec, corpora=None) -> Tuple["ComparisonReport", List[RunRecord]]:
    """Train every (method, lambda, seed) combination and compare them."""
    corpora = corpora if corpora is not None else spec.load_corpora()
    records = [_run_one(spec, key, corpora) for key in run_keys(spec)]
    return compare(records, reference=spec.reference), records


def perturbation_sweep(spec: ExperimentSpec, corpora=None) -> Tuple[Dict[str, "SweepTable"], List[RunRecord]]:
    """Run the matrix at every removal and noise fraction (training masks only).

    Fraction 0 is always included and is the unperturbed matrix.
    """
    corpora = corpora if corpora is not None else spec.load_corpora()
    records: List[RunRecord] = []
    base = [_run_one(spec, key, corpora) for key in run_keys(spec)]
    records += base
    for kind, fractions in ((REMOVAL, spec.removal), (NOISE, spec.noise)):
        for frac in fractions:
            if frac != 0.0:
                records += run_perturbed(spec, kind, frac, corpora)
    return sweep_tables(records), records


def run_perturbed(spec: ExperimentSpec, kind: str, fraction: float, corpora=None) -> List[RunRecord]:
    """Train the matrix once on training masks perturbed by ``kind`` at ``fraction``.

    Every method sees the same perturbed corpus for a given seed index.
    """
    if kind not in (REMOVAL, NOISE):
        raise ConfigError(f"perturbation: expected {REMOVAL!r} or {NOISE!r}, got {kind!r}")
    corpora = corpora if corpora is not None else spec.load_corpora()
    records = []
    for i in range(spec.seeds):
        pc = _perturbed(corpora, kind, fraction, perturbation_seed(spec.seed, kind, fraction, i))
        for m in spec.methods:
            for lam in spec.lams_for(m):
                records.append(_run_one(spec, RunKey(m, lam, i, kind, fraction), pc))
    return records


# ---------------------------------------------------------------------------
# aggregation

def _key(rec: RunRecord) -> Dict:
    exp = rec.config.get("experiment")
    if exp is None:
        train = rec.config.get("train", {})
        exp = {"method": train.get("method", "none"), "lam": train.get("lam", 0.0), "seed_index": 0,
               "perturbation": "none", "fraction": 0.0}
    return exp


def _metric(rec: RunRecord, metric: str) -> Optional[float]:
    return rec.final.get("test", {}).get(metric) if rec.status == "ok" else None


@dataclass
class ComparisonRow:
    method: str
    lam: float
    n: int
    failed: int
    stats: Dict[str, Tuple[float, float]]
    tests: Dict[str, Optional[WelchResult]]
    samples: Dict[str, List[float]]


@dataclass
class ComparisonReport:
    reference: str
    rows: List[ComparisonRow]

    @property
    def complete(self) -> bool:
        return all(r.failed == 0 for r in self.rows)

    def row(self, method: str, lam: Optional[float] = None) -> ComparisonRow:
        for r in self.rows:
            if r.method == method and (lam is None or r.lam == lam):
                return r
        raise KeyError((method, lam))

    def to_tsv(self) -> str:
        head = ["method", "lam", "n", "failed"]
        for m in METRICS:
            head += [f"{m}_mean", f"{m}_std", f"{m}_t", f"{m}_p"]
        lines = ["\t".join(head)]
        for r in self.rows:
            cells = [r.method, f"{r.lam:g}", str(r.n), str(r.failed)]
            for m in METRICS:
                mu, sd = r.stats[m]
                w = r.tests[m]
                cells += [_fmt(mu), _fmt(sd)] + ([_fmt(w.t), _fmt(w.p)] if w else ["n/a", "n/a"])
            lines.append("\t".join(cells))
        lines.append(f"# Welch t-test (unpaired, two-sided) against {self.reference}")
        if not self.complete:
            lines.append("# incomplete: failed runs were excluded")
        return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def _group(records: Iterable[RunRecord]) -> Dict[Tuple, List[RunRecord]]:
    groups: Dict[Tuple, List[RunRecord]] = {}
    for rec in records:
        k = _key(rec)
        groups.setdefault((k["perturbation"], float(k["fraction"]), k["method"], float(k["lam"])), []).append(rec)
    for recs in groups.values():
        recs.sort(key=lambda r: _key(r)["seed_index"])
    return groups


def compare(records: Sequence[RunRecord], reference: str = "base") -> ComparisonReport:
    """Aggregate unperturbed runs per (method, lambda) and test each against ``reference``.

    The reference samples are those of the reference method at the same
    lambda, or at its only lambda when the method has one.
    """
    groups = {k[2:]: v for k, v in _group(records).items() if k[0] == "none" or k[1] == 0.0}
    samples = {k: {m: [x for x in (_metric(r, m) for r in recs) if x is not None] for m in METRICS}
               for k, recs in groups.items()}
    ref_lams = sorted(lam for (meth, lam) in groups if meth == reference)
    rows = []
    for (method, lam), recs in sorted(groups.items()):
        ref_key = (reference, lam) if (reference, lam) in groups else (
            (reference, ref_lams[0]) if len(ref_lams) == 1 else None)
        s = samples[(method, lam)]
        row = ComparisonRow(method, lam, n=len(s["accuracy"]), failed=sum(r.status != "ok" for r in recs),
                            stats={m: mean_std(s[m]) for m in METRICS}, tests={}, samples=s)
        for m in METRICS:
            row.tests[m] = welch_test(s[m], samples[ref_key][m]) if ref_key else None
        rows.append(row)
    return ComparisonReport(reference=reference, rows=rows)


@dataclass
class SweepTable:
    kind: str
    fractions: List[float]
    # (method, lam) -> per-fraction (mean, std, n)
    series: Dict[Tuple[str, float], List[Tuple[float, float, int]]]

    def mean(self, method: str, fraction: float, lam: Optional[float] = None) -> float:
        for (m, la), vals in self.series.items():
            if m == method and (lam is None or la == lam):
                return vals[self.fractions.index(fraction)][0]
        raise KeyError(method)

    def to_tsv(self, metric: str = "accuracy") -> str:
        lines = ["\t".join(["method", "lam"] + [f"{self.kind}={f:g}" for f in self.fractions])]
        for (m, lam), vals in sorted(self.series.items()):
            lines.append("\t".join([m, f"{lam:g}"] + [_fmt(mu) for mu, _, _ in vals]))
        return "\n".join(lines) + f"\n# mean test {metric} over seeds\n"


def sweep_tables(records: Sequence[RunRecord], metric: str = "accuracy") -> Dict[str, SweepTable]:
    groups = _group(records)
    out = {}
    for kind in PERTURBATIONS:
        fracs = sorted({0.0} | {f for (p, f, _, _) in groups if p == kind})
        if len(fracs) == 1:
            continue
        series = {}
        for (p, f, m, lam), recs in groups.items():
            if p != "none" and f != 0.0:
                continue
            series[(m, lam)] = []
        for ml in series:
            for f in fracs:
                recs = groups.get(("none", 0.0) + ml, []) if f == 0.0 else groups.get((kind, f) + ml, [])
                vals = [x for x in (_metric(r, metric) for r in recs) if x is not None]
                mu, sd = mean_std(vals)
                series[ml].append((mu, sd, len(vals)))
        out[kind] = SweepTable(kind, fracs, series)
    return out


def retained_gain(table: SweepTable, method: str, baseline: str, fraction: float) -> float:
    """Share of the unperturbed gain over ``baseline`` that survives ``fraction``."""
    base0 = table.mean(baseline, 0.0)
    gain0 = table.mean(method, 0.0) - base0
    if gain0 <= 0:
        return math.nan
    return (table.mean(method, fraction) - base0) / gain0


# ---------------------------------------------------------------------------
# salience traces

TRACE_REPORT_GROUPS = (PIN_PLANTED, CRUCIAL_RATIONALE, ALL_RATIONALE)


@dataclass
class TraceReport:
    # run label (method@lambda, plus any perturbation) -> group -> per-step mean over runs (None where no run had the group)
    series: Dict[str, Dict[str, List[Optional[float]]]]
    notes: List[str]

    def to_tsv(self) -> str:
        lines = ["\t".join(["method", "group", "step", "salience"])]
        for m in sorted(self.series):
            for g in sorted(self.series[m]):
                for i, v in enumerate(self.series[m][g]):
                    lines.append("\t".join([m, g, str(i), _fmt(v)]))
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def _pointwise_mean(series: List[List[Optional[float]]]) -> List[Optional[float]]:
    length = max((len(s) for s in series), default=0)
    out = []
    for i in range(length):
        vals = [s[i] for s in series if i < len(s) and s[i] is not None]
        out.append(float(np.mean(vals)) if vals else None)
    return out


def _trace_label(k: Dict) -> str:
    label = f"{k['method']}@{float(k['lam']):g}"
    if k["perturbation"] != "none" and float(k["fraction"]) != 0.0:
        label += f" {k['perturbation']}={float(k['fraction']):g}"
    return label


def salience_trace_report(records: Sequence[RunRecord], groups: Sequence[str] = TRACE_REPORT_GROUPS) -> TraceReport:
    """Per-step mean salience per group, averaged pointwise over the runs of
    each (method, lambda, perturbation) setting."""
    by_method: Dict[str, List[RunRecord]] = {}
    for rec in records:
        if rec.status == "ok":
            by_method.setdefault(_trace_label(_key(rec)), []).append(rec)
    series: Dict[str, Dict[str, List[Optional[float]]]] = {}
    notes = []
    for m, recs in sorted(by_method.items()):
        series[m] = {}
        for g in groups:
            s = _pointwise_mean([r.trace(g) for r in recs])
            if all(v is None for v in s):
                notes.append(f"{m}: no {g} words in the traced batches; series empty")
                s = []
            series[m][g] = s
    if not series:
        notes.append("no runs to trace")
    return TraceReport(series, notes)


# ---------------------------------------------------------------------------
# reports

def load_runs(directory) -> List[RunRecord]:
    directory = Path(directory)
    runs = directory / "runs" if (directory / "runs").is_dir() else directory
    return [RunRecord.load(p) for p in sorted(runs.glob("*.jsonl"))]


def write_report(records: Sequence[RunRecord], out_dir, reference: str = "base", charts: bool = True) -> List[Path]:
    """Render comparison, sweep and trace tables (TSV) and line charts (SVG)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name: str, text: str):
        path = out_dir / name
        path.write_text(text, encoding="utf-8")
        written.append(path)

    emit("comparison.tsv", compare(records, reference).to_tsv())
    tables = sweep_tables(records)
    for kind, table in tables.items():
        emit(f"sweep_{kind}.tsv", table.to_tsv())
    traces = salience_trace_report(records)
    emit("salience_trace.tsv", traces.to_tsv())
    if charts:
        for kind, table in tables.items():
            written.append(_sweep_chart(table, out_dir / f"sweep_{kind}.svg"))
        written.append(_trace_chart(traces, out_dir / "salience_trace.svg"))
    return written


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed metadata keeps repeated renders byte-identical
    matplotlib.rcParams["svg.hashsalt"] = "distant-rationales"
    return plt


def _sweep_chart(table: SweepTable, path: Path) -> Path:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (m, lam), vals in sorted(table.series.items()):
        ax.plot(table.fractions, [v[0] for v in vals], marker="o", label=f"{m} ({lam:g})")
    ax.set_xlabel(f"{table.kind} fraction")
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _trace_chart(report: TraceReport, path: Path) -> Path:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in sorted(report.series):
        for g, s in sorted(report.series[m].items()):
            if s:
                xs = [i for i, v in enumerate(s) if v is not None]
                ax.plot(xs, [s[i] for i in xs], label=f"{m}: {g}", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("mean salience")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
