"""Metrics, evaluation protocols, continual-learning matrices and reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import train as training
from .model import REPORT_NAMES, HawkesModel, parse_kind
from .seqdata import TEST, TRAIN, VAL, CorpusSplit, Setup
from .train import EventSet, TrainConfig, TrainLog


@dataclass
class SequenceMetrics:
    id: str
    n_events: int
    mnll: float
    mae: float
    n_predictions: int
    failures: int


@dataclass
class MetricReport:
    setup: Setup
    model: str
    mnll: float
    mae: float
    per_sequence: list[SequenceMetrics]
    failures: int = 0
    log: TrainLog | None = field(default=None, repr=False)

    @property
    def n_events(self) -> int:
        return sum(p.n_events for p in self.per_sequence)

    def aggregate(self) -> tuple[float, float]:
        """Event-weighted means of the per-sequence values."""
        n = np.array([p.n_events for p in self.per_sequence], dtype=float)
        k = np.array([p.n_predictions for p in self.per_sequence], dtype=float)
        mn = np.array([p.mnll if p.n_events else 0.0 for p in self.per_sequence])
        ma = np.array([p.mae if p.n_predictions else 0.0 for p in self.per_sequence])
        return float(n @ mn / n.sum()), float(k @ ma / k.sum()) if k.sum() else math.nan


# ----------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------


def event_logliks(model: HawkesModel, events: EventSet) -> np.ndarray:
    batch = events.batch(model)
    return model.loglik(batch, events.descriptors)


def mnll(model: HawkesModel, events: EventSet) -> float:
    """Negative mean per-event log-likelihood over all listed events."""
    if events.n_events == 0:
        raise ValueError("no events to evaluate")
    return -float(np.mean(event_logliks(model, events)))


@dataclass
class Predictions:
    t_pred: np.ndarray
    t_true: np.ndarray
    tau: np.ndarray
    ok: np.ndarray
    seq_pos: np.ndarray
    phi_at_pred: np.ndarray

    @property
    def failures(self) -> int:
        return int(np.sum(~self.ok))


def bisection_holds(model, batch, descriptors, tau, tol) -> np.ndarray:
    """Re-evaluate ``|Phi(tau*) - ln 2| <= tol`` for every predicted row."""
    phi = model.phi(batch, np.where(np.isfinite(tau), tau, 0.0), descriptors)
    return np.abs(phi - math.log(2.0)) <= tol


def predict(model: HawkesModel, events: EventSet, tol: float = 1e-8) -> Predictions:
    """Median next-event predictions from the true history (single-step lookahead)."""
    batch = events.batch(model)
    t_pred, tau, ok = model.predict(batch, events.descriptors, tol)
    ok = ok & bisection_holds(model, batch, events.descriptors, tau, tol)
    t_true = batch.last_time + batch.tau
    phi = model.phi(batch, np.where(np.isfinite(tau), tau, 0.0), events.descriptors)
    return Predictions(t_pred, t_true, tau, ok, batch.seq_pos, phi)


def mae(model: HawkesModel, events: EventSet, tol: float = 1e-8) -> tuple[float, int]:
    """Mean absolute error of the median predictions; failed predictions are excluded.

    Returns ``(mae, number of failures)``.
    """
    p = predict(model, events, tol)
    if not p.ok.any():
        return math.nan, p.failures
    return float(np.mean(np.abs(p.t_pred - p.t_true)[p.ok])), p.failures


def evaluate(model: HawkesModel, events: EventSet, tol: float = 1e-8) -> tuple[float, float, list[SequenceMetrics], int]:
    """MNLL, MAE and per-sequence breakdown in one pass."""
    batch = events.batch(model)
    ll = model.loglik(batch, events.descriptors)
    t_pred, tau, ok = model.predict(batch, events.descriptors, tol)
    ok = ok & bisection_holds(model, batch, events.descriptors, tau, tol)
    err = np.abs(t_pred - (batch.last_time + batch.tau))
    per = []
    for i, seq in enumerate(events.seqs):
        sel = batch.seq_pos == i
        n = int(sel.sum())
        if n == 0:
            continue
        good = sel & ok
        per.append(
            SequenceMetrics(
                seq.id, n, -float(np.mean(ll[sel])),
                float(np.mean(err[good])) if good.any() else math.nan,
                int(good.sum()), int((sel & ~ok).sum()),
            )
        )
    total_mae = float(np.mean(err[ok])) if ok.any() else math.nan
    return -float(np.mean(ll)), total_mae, per, int(np.sum(~ok))


# ----------------------------------------------------------------------
# zero-shot protocols
# ----------------------------------------------------------------------


def _records_by_id(corpus):
    return {seq.id: (seq, desc) for seq, desc in corpus}


def protocol_sets(corpus, split: CorpusSplit):
    """Training records/roles, validation events and test events of a split."""
    by_id = _records_by_id(corpus)
    setup = split.setup
    if setup is Setup.ZERO_SHOT:
        train_recs = [by_id[i] for i in split.seen]
        val = EventSet.from_roles([by_id[i] for i in split.unseen_val], None, VAL)
        test = EventSet.from_roles([by_id[i] for i in split.unseen_test], None, TEST)
        return train_recs, None, val, test
    if setup is Setup.GENERALIZED_ZERO_SHOT:
        train_recs = [by_id[i] for i in split.seen]
        train_roles = [split.event_roles(s) for s, _ in train_recs]
        val_recs = [by_id[i] for i in split.unseen_val]
        val = EventSet.from_roles(val_recs, [split.event_roles(s) for s, _ in val_recs], VAL)
        test_recs = [by_id[i] for i in split.seen + split.unseen_test]
        test = EventSet.from_roles(test_recs, [split.event_roles(s) for s, _ in test_recs], TEST)
        return train_recs, train_roles, val, test
    if setup is Setup.STANDARD:
        train_recs = [by_id[i] for i in split.all_ids()]
        train_roles = [split.event_roles(s) for s, _ in train_recs]
        val = EventSet.from_roles(train_recs, train_roles, VAL)
        test_recs = [by_id[i] for i in split.unseen]
        test = EventSet.from_roles(test_recs, [split.event_roles(s) for s, _ in test_recs], TEST)
        return train_recs, train_roles, val, test
    raise ValueError(f"run_setup does not handle the {setup.value} setup; use run_cl")


def run_setup(corpus, split: CorpusSplit, model: str, cfg: TrainConfig, setup=None) -> tuple[MetricReport, HawkesModel]:
    """Train ``model`` under the split's protocol and evaluate it on the test events."""
    if setup is not None and Setup.parse(setup) is not split.setup:
        raise ValueError(f"split was made for {split.setup.value}, not {Setup.parse(setup).value}")
    kind = parse_kind(model)
    cfg = cfg.replace(variant=kind)
    train_recs, train_roles, val, test = protocol_sets(corpus, split)
    train_set = EventSet.from_roles(train_recs, train_roles, TRAIN)
    log_ = TrainLog()
    fitted = training.new_model(cfg, train_set.descriptors.shape[1], training.time_scale_for(train_set))
    training.fit(fitted, train_set, val if val.n_events else None, cfg, cfg.epochs, log_)
    m, a, per, fails = evaluate(fitted, test, cfg.tol)
    report = MetricReport(split.setup, REPORT_NAMES[kind], m, a, per, fails, log_)
    return report, fitted


# ----------------------------------------------------------------------
# continual learning
# ----------------------------------------------------------------------


@dataclass
class CLMatrix:
    """``entries[s][c]``: metric on sequence ``c`` after training through stage ``s`` (1-based, c <= s)."""

    entries: dict[int, dict[int, float]] = field(default_factory=dict)

    def set(self, s, c, value):
        if c > s:
            raise ValueError("only c <= s is defined")
        self.entries.setdefault(s, {})[c] = float(value)

    def get(self, s, c) -> float:
        return self.entries[s][c]

    @property
    def stages(self) -> list[int]:
        return sorted(self.entries)

    def cells(self) -> int:
        return sum(len(row) for row in self.entries.values())

    def averaged(self) -> list[float]:
        """Mean over ``c <= s`` of ``R[s][c]`` for every stage, skipping undefined cells."""
        out = []
        for s in self.stages:
            vals = np.array([self.entries[s][c] for c in sorted(self.entries[s])])
            vals = vals[~np.isnan(vals)]
            out.append(float(vals.mean()) if vals.size else math.nan)
        return out


@dataclass
class CLRun:
    beta: float
    mnll: CLMatrix
    mae: CLMatrix
    val_mnll: CLMatrix
    result: training.ContinualResult | None = field(default=None, repr=False)

    @property
    def curve_mnll(self):
        return self.mnll.averaged()

    @property
    def curve_mae(self):
        return self.mae.averaged()


@dataclass
class CLSummary:
    variant: str
    runs: dict[float, CLRun]
    best_beta: float

    def row(self) -> dict:
        base = self.runs.get(0.0)
        best = self.runs[self.best_beta]
        return {
            "variant": self.variant,
            "best_beta": self.best_beta,
            "mnll_without_cl": base.curve_mnll[-1] if base else math.nan,
            "mnll_with_cl": best.curve_mnll[-1],
            "mae_without_cl": base.curve_mae[-1] if base else math.nan,
            "mae_with_cl": best.curve_mae[-1],
        }


def evaluate_stage(checkpoint: HawkesModel, stream, upto: int, role: int, tol: float = 1e-8):
    """MNLL and MAE of one checkpoint on the ``role`` portion of sequences ``1..upto``."""
    out = []
    for c in range(upto):
        seq, desc = stream[c]
        events = EventSet.from_roles([(seq, desc)], [training.cl_roles(seq)], role)
        if events.n_events == 0:
            # short sequences can have an empty validation or test block
            m, a = math.nan, math.nan
        elif role == TEST:
            m, a, _, _ = evaluate(checkpoint, events, tol)
        else:
            m, a = mnll(checkpoint, events), math.nan
        out.append((m, a))
    return out


def cl_matrices(result: training.ContinualResult, stream, beta: float, tol: float = 1e-8) -> CLRun:
    run = CLRun(beta, CLMatrix(), CLMatrix(), CLMatrix(), result)
    for s, ckpt in enumerate(result.checkpoints, start=1):
        for c, (m, a) in enumerate(evaluate_stage(ckpt, stream, s, TEST, tol), start=1):
            run.mnll.set(s, c, m)
            run.mae.set(s, c, a)
        for c, (m, _) in enumerate(evaluate_stage(ckpt, stream, s, VAL, tol), start=1):
            run.val_mnll.set(s, c, m)
    return run


def run_cl(stream, cfg: TrainConfig, beta_values, epochs=None, include_zero: bool = True) -> CLSummary:
    """Continual learning for every ``beta`` (plus the unregularized run unless ``include_zero`` is off).

    The best ``beta > 0`` is the one with the lowest final-stage average
    validation MNLL over all sequences seen so far.
    """
    if len(stream) < 2:
        raise ValueError("continual learning needs at least two sequences")
    betas = sorted({float(b) for b in beta_values} | ({0.0} if include_zero else set()))
    runs = {}
    for beta in betas:
        result = training.train_continual(stream, cfg, beta, epochs)
        runs[beta] = cl_matrices(result, stream, beta, cfg.tol)
    swept = [b for b in betas if b > 0] or [0.0]
    best = min(swept, key=lambda b: (runs[b].val_mnll.averaged()[-1], b))
    return CLSummary(REPORT_NAMES[cfg.variant], runs, best)


# ----------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


HEADLINE_COLUMNS = ["setup", "model", "mnll", "mae", "n_events", "prediction_failures"]
PER_SEQUENCE_COLUMNS = ["setup", "model", "id", "n_events", "mnll", "mae", "n_predictions", "failures"]
CL_MATRIX_COLUMNS = ["stage", "sequence", "mnll", "mae"]
CL_CURVE_COLUMNS = ["beta", "stage", "avg_mnll", "avg_mae", "avg_val_mnll"]
CL_SUMMARY_COLUMNS = ["variant", "best_beta", "mnll_without_cl", "mnll_with_cl", "mae_without_cl", "mae_with_cl"]


def headline_csv(reports) -> str:
    rows = [
        [r.setup.value, r.model, _fmt(r.mnll), _fmt(r.mae), r.n_events, r.failures] for r in reports
    ]
    return _csv(rows, HEADLINE_COLUMNS)


def per_sequence_csv(reports) -> str:
    rows = []
    for r in reports:
        for p in r.per_sequence:
            rows.append([r.setup.value, r.model, p.id, p.n_events, _fmt(p.mnll), _fmt(p.mae), p.n_predictions, p.failures])
    return _csv(rows, PER_SEQUENCE_COLUMNS)


def cl_matrix_csv(run: CLRun) -> str:
    rows = []
    for s in run.mnll.stages:
        for c in sorted(run.mnll.entries[s]):
            rows.append([s, c, _fmt(run.mnll.get(s, c)), _fmt(run.mae.get(s, c))])
    return _csv(rows, CL_MATRIX_COLUMNS)


def cl_curves_csv(summary: CLSummary) -> str:
    rows = []
    for beta in sorted(summary.runs):
        run = summary.runs[beta]
        for s, m, a, v in zip(run.mnll.stages, run.curve_mnll, run.curve_mae, run.val_mnll.averaged()):
            rows.append([_fmt(beta), s, _fmt(m), _fmt(a), _fmt(v)])
    return _csv(rows, CL_CURVE_COLUMNS)


def cl_summary_csv(summaries) -> str:
    rows = []
    for s in summaries:
        r = s.row()
        rows.append([r[k] if k == "variant" else _fmt(r[k]) for k in CL_SUMMARY_COLUMNS])
    return _csv(rows, CL_SUMMARY_COLUMNS)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf"]


def svg_lines(series: dict[str, tuple[list[float], list[float]]], title: str, xlabel: str, ylabel: str,
              width: int = 480, height: int = 320) -> str:
    """Self-contained SVG with one polyline per series."""
    pad_l, pad_r, pad_t, pad_b = 64, 120, 32, 44
    xs = [x for xv, _ in series.values() for x in xv]
    ys = [y for _, yv in series.values() for y in yv if not math.isnan(y)]
    x0, x1 = (min(xs), max(xs)) if xs else (0.0, 1.0)
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * pw

    def py(y):
        return pad_t + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="black"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="black"/>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" text-anchor="middle" font-family="sans-serif" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{pad_t + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 14 {pad_t + ph / 2:.1f})">{ylabel}</text>',
    ]
    for val, y in ((y0, py(y0)), (y1, py(y1))):
        out.append(f'<text x="{pad_l - 4}" y="{y + 4:.1f}" text-anchor="end" font-family="sans-serif" font-size="10">{val:.4g}</text>')
    for val, x in ((x0, px(x0)), (x1, px(x1))):
        out.append(f'<text x="{x:.1f}" y="{pad_t + ph + 14}" text-anchor="middle" font-family="sans-serif" font-size="10">{val:.4g}</text>')
    for i, (name, (xv, yv)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xv, yv) if not math.isnan(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"><title>{name}</title></polyline>')
        ly = pad_t + 14 * (i + 1)
        out.append(f'<line x1="{pad_l + pw + 10}" y1="{ly - 4}" x2="{pad_l + pw + 26}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{pad_l + pw + 30}" y="{ly}" font-family="sans-serif" font-size="11">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _beta_label(beta: float) -> str:
    return f"beta={beta:g}"


def emit_report(obj, out_dir, prefix: str = "") -> list[Path]:
    """Write CSV tables (and SVG plots for continual-learning results).

    ``obj`` is a :class:`MetricReport`, a list of them, a :class:`CLSummary`
    or a list of summaries.  Returns the written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / f"{prefix}{name}"
        path.write_text(text, encoding="utf-8")
        written.append(path)

    items = obj if isinstance(obj, (list, tuple)) else [obj]
    if not items:
        return written
    if isinstance(items[0], MetricReport):
        put("headline.csv", headline_csv(items))
        put("per_sequence.csv", per_sequence_csv(items))
        return written
    for summary in items:
        tag = summary.variant
        for beta in sorted(summary.runs):
            put(f"cl_matrix_{tag}_beta{beta:g}.csv", cl_matrix_csv(summary.runs[beta]))
        put(f"cl_curves_{tag}.csv", cl_curves_csv(summary))
        for metric in ("mnll", "mae"):
            series = {}
            for beta in sorted(summary.runs):
                run = summary.runs[beta]
                curve = run.curve_mnll if metric == "mnll" else run.curve_mae
                series[_beta_label(beta)] = (list(map(float, run.mnll.stages)), curve)
            put(
                f"cl_avg_{metric}_{tag}.svg",
                svg_lines(series, f"{tag}: average {metric.upper()} over previous sequences", "stage", f"avg {metric.upper()}"),
            )
        betas = sorted(summary.runs)
        put(
            f"beta_sweep_{tag}.svg",
            svg_lines(
                {"final avg MNLL": (betas, [summary.runs[b].curve_mnll[-1] for b in betas])},
                f"{tag}: final average MNLL vs beta", "beta", "avg MNLL",
            ),
        )
    put("cl_summary.csv", cl_summary_csv(items))
    return written
