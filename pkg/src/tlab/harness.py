"""Transfer-scenario orchestration: sample test inputs, sweep attacks with
optional margin boosting, evaluate on source and target models, and render
the results as CSV or markdown tables.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, run_attack
from .boost import BoostConfig, attack_and_boost
from .errors import ConfigurationError, DataError, RegistryError
from .metrics import asr, distortion, mean_psnr

F32 = np.float32

SCENARIO_KINDS = ("CROSS_TRAINING", "CROSS_MODEL", "CROSS_MODEL_AND_TRAINING")

CSV_HEADER = ["sn", "tn", "attack", "psnr", "l1", "maxdist",
              "asr_sn", "asr_tn", "n", "seed"]

MARKDOWN_HEADER = ["SN", "TN", "Attack Type", "PSNR", "L1 dist", "Max dist",
                   "ASR (SN)", "ASR (TN)"]


@dataclass(frozen=True)
class ScenarioSpec:
    """One transferability experiment.

    source/target are (architecture, dataset id) pairs; the kind constrains
    which of the two coordinates must differ.
    """

    kind: str
    source: tuple[str, str]
    target: tuple[str, str]
    attack_sweep: tuple
    boost: BoostConfig | None = None
    n_samples: int = 500

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if not self.attack_sweep:
            raise ConfigurationError("attack_sweep is empty")
        if self.n_samples < 1:
            raise ConfigurationError("n_samples must be positive")
        same_arch = self.source[0] == self.target[0]
        same_data = self.source[1] == self.target[1]
        if self.kind == "CROSS_TRAINING" and not (same_arch and not same_data):
            raise ConfigurationError(
                "CROSS_TRAINING needs the same architecture and different datasets")
        if self.kind == "CROSS_MODEL" and not (not same_arch and same_data):
            raise ConfigurationError(
                "CROSS_MODEL needs different architectures and the same dataset")
        if self.kind == "CROSS_MODEL_AND_TRAINING" and (same_arch or same_data):
            raise ConfigurationError(
                "CROSS_MODEL_AND_TRAINING needs both coordinates to differ")


@dataclass(frozen=True)
class ReportRow:
    sn: str
    tn: str
    attack: str
    psnr: float
    l1: float
    maxdist: float
    asr_sn: float
    asr_tn: float
    n: int
    seed: int


@dataclass
class TransferReport:
    rows: list[ReportRow] = field(default_factory=list)
    boost_desc: str = ""
    notes: list[str] = field(default_factory=list)


class ModelRegistry:
    """Read-only lookup of trained models and datasets for a run."""

    def __init__(self):
        self._models = {}
        self._datasets = {}

    def add_model(self, architecture: str, dataset_id: str, model):
        self._models[(architecture, dataset_id)] = model

    def add_dataset(self, dataset):
        self._datasets[dataset.dataset_id] = dataset

    def model(self, architecture: str, dataset_id: str):
        key = (architecture, dataset_id)
        if key not in self._models:
            raise RegistryError(f"no trained model registered for {key}")
        return self._models[key]

    def dataset(self, dataset_id: str):
        if dataset_id not in self._datasets:
            raise RegistryError(f"no dataset registered for {dataset_id!r}")
        return self._datasets[dataset_id]


def describe_attack(config: AttackConfig) -> str:
    if config.kind in ("FGSM", "IFGSM", "PGD"):
        return f"{config.kind} eps={config.epsilon:g}"
    if config.kind == "JSMA":
        return f"JSMA theta={config.theta:g}"
    if config.kind == "CW":
        return f"CW c={config.c:g}"
    return config.kind


def _sample_pool(model, dataset, n_samples, rng):
    """Seeded class-stratified test inputs the model classifies correctly."""
    xs, ys = dataset.split_arrays("test")
    x01 = (xs[:, None].astype(F32)) / F32(255)
    logits = []
    for i in range(0, len(x01), 200):
        logits.append(model.forward_batch(x01[i:i + 200]))
    pred = np.concatenate(logits).argmax(axis=1)
    correct = pred == ys
    quota = [(n_samples + 1) // 2, n_samples // 2]
    chosen = []
    for cls, want in enumerate(quota):
        pool = np.flatnonzero(correct & (ys == cls))
        if len(pool) < want:
            raise DataError(
                f"class {cls}: need {want} correctly-classified test "
                f"samples, found {len(pool)}")
        chosen.append(rng.permutation(pool)[:want])
    idx = np.sort(np.concatenate(chosen))
    return x01[idx], ys[idx].astype(int)


def run_scenario(spec: ScenarioSpec, registry: ModelRegistry,
                 seed: int) -> TransferReport:
    """Attack/boost a seeded sample pool and aggregate one row per config.

    The pool is drawn once from the source dataset's test split and reused
    across every attack row for comparability.
    """
    source = registry.model(*spec.source)
    target = registry.model(*spec.target)
    dataset = registry.dataset(spec.source[1])
    rng = np.random.default_rng(seed)
    x_pool, y_pool = _sample_pool(source, dataset, spec.n_samples, rng)

    sn_id = f"{spec.source[0]}:{spec.source[1]}"
    tn_id = f"{spec.target[0]}:{spec.target[1]}"
    report = TransferReport()
    if spec.boost is not None:
        report.boost_desc = (f"boost eps={spec.boost.epsilon:g} "
                             f"delta={spec.boost.delta:g}")
    for row_idx, attack_cfg in enumerate(spec.attack_sweep):
        cfg = dataclasses.replace(attack_cfg, seed=seed + row_idx)
        sn_flags, tn_flags, psnrs, l1s, maxds = [], [], [], [], []
        for x, y in zip(x_pool, y_pool):
            if spec.boost is not None:
                out = attack_and_boost(source, x, int(y), cfg, spec.boost)
                final = out.boosted
            else:
                final = run_attack(source, x, int(y), cfg).adversarial
            sn_flags.append(source.predict01(final) != y)
            tn_flags.append(target.predict01(final) != y)
            stats = distortion(x * 255.0, final * 255.0)
            psnrs.append(stats.psnr_db)
            l1s.append(stats.l1_mean)
            maxds.append(stats.max_abs)
        psnr, excluded = mean_psnr(psnrs)
        if excluded:
            report.notes.append(
                f"{describe_attack(cfg)}: {excluded} identical pairs "
                "excluded from mean PSNR")
        report.rows.append(ReportRow(
            sn=sn_id, tn=tn_id, attack=describe_attack(cfg),
            psnr=psnr, l1=float(np.mean(l1s)), maxdist=float(np.mean(maxds)),
            asr_sn=asr(sn_flags), asr_tn=asr(tn_flags),
            n=spec.n_samples, seed=seed))
    return report


def _fmt2(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.2f}"


def render_report(report: TransferReport, format: str) -> str:
    """Serialize a report as 'csv' (pinned header) or 'markdown'."""
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in report.rows:
            writer.writerow([r.sn, r.tn, r.attack, _fmt2(r.psnr),
                             _fmt2(r.l1), _fmt2(r.maxdist),
                             f"{r.asr_sn:.4f}", f"{r.asr_tn:.4f}",
                             r.n, r.seed])
        return buf.getvalue()
    if format == "markdown":
        lines = ["| " + " | ".join(MARKDOWN_HEADER) + " |",
                 "|" + "---|" * len(MARKDOWN_HEADER)]
        for r in report.rows:
            lines.append("| " + " | ".join([
                r.sn, r.tn, r.attack, _fmt2(r.psnr), _fmt2(r.l1),
                _fmt2(r.maxdist), f"{r.asr_sn:.4f}", f"{r.asr_tn:.4f}"]) + " |")
        if report.boost_desc:
            lines.append("")
            lines.append(report.boost_desc)
        return "\n".join(lines) + "\n"
    raise ConfigurationError(f"unknown report format {format!r}")


def parse_report(text: str) -> TransferReport:
    """Inverse of render_report(..., 'csv')."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty report file") from None
    if header != CSV_HEADER:
        raise DataError(f"unexpected CSV header {header}")
    rows = []
    for rec in reader:
        if not rec:
            continue
        if len(rec) != len(CSV_HEADER):
            raise DataError(f"malformed report row {rec}")
        rows.append(ReportRow(
            sn=rec[0], tn=rec[1], attack=rec[2], psnr=float(rec[3]),
            l1=float(rec[4]), maxdist=float(rec[5]), asr_sn=float(rec[6]),
            asr_tn=float(rec[7]), n=int(rec[8]), seed=int(rec[9])))
    return TransferReport(rows=rows)


@dataclass(frozen=True)
class ComparisonRow:
    key: tuple[str, str, str]  # (sn, tn, attack)
    baseline_asr_tn: float
    boosted_asr_tn: float
    delta: float
    transfers: bool  # boosted ASR(TN) strictly above 0.40
    improved: bool  # boosted strictly above baseline


def compare_reports(baseline: TransferReport,
                    boosted: TransferReport) -> list[ComparisonRow]:
    """Per-row ASR(TN) deltas and verdicts, matched on (sn, tn, attack)."""
    base = {(r.sn, r.tn, r.attack): r for r in baseline.rows}
    boost = {(r.sn, r.tn, r.attack): r for r in boosted.rows}
    unmatched = sorted(base.keys() ^ boost.keys())
    if unmatched:
        raise DataError(f"unmatched report keys: {unmatched}")
    out = []
    for key in (k for k in ((r.sn, r.tn, r.attack) for r in baseline.rows)):
        b, s = base[key], boost[key]
        out.append(ComparisonRow(
            key=key, baseline_asr_tn=b.asr_tn, boosted_asr_tn=s.asr_tn,
            delta=s.asr_tn - b.asr_tn,
            transfers=s.asr_tn > 0.40,
            improved=s.asr_tn > b.asr_tn))
    return out
