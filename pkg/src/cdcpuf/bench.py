"""Experiment driver: instance ensembles, training-size sweeps and reports.

Every random choice in an experiment is derived from ``master_seed`` through
:func:`derive_seed`, so one seed fixes the whole results transcript.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from .attack_lr import LrTrainConfig, lr_accuracy, lr_train
from .attack_nn import NnTrainConfig, nn_accuracy, nn_train
from .crp import generate_crpset, split_crpset, split_sizes
from .errors import BudgetError, DivergedTrainingError, InvalidInputError
from .puf import sample_cdc_xpuf

_MASK = (1 << 64) - 1
_TAG_PUF, _TAG_CRP, _TAG_RUN = 1, 2, 3
_ATTACK_IDS = {"lr": 1, "nn": 2}

REPORT_COLUMNS = [
    "pufType", "n", "k", "attack", "trainingSize",
    "averageAccuracy", "successRate", "medianWallTime",
]


def is_success(test_accuracy, converged, threshold):
    """Strictly above ``threshold``; a perfect score always counts."""
    if not converged or test_accuracy is None:
        return False
    return test_accuracy > threshold or test_accuracy == 1.0


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(master_seed, *parts):
    """Fold integer ``parts`` into ``master_seed`` with splitmix64; 64-bit result."""
    h = _splitmix64(master_seed & _MASK)
    for p in parts:
        h = _splitmix64(h ^ (p & _MASK))
    return h


def default_training_sizes(max_train):
    sizes, s = [], 1000
    while s <= max_train:
        sizes.append(s)
        s *= 2
    return sizes


@dataclass
class ExperimentConfig:
    puf_type: str = "cdc"  # "cdc" or "xor"
    n: int = 64
    k: int = 3
    instance_count: int = 10
    attack: str = "lr"
    training_sizes: list = field(default_factory=list)  # empty: x2 grid from 1k
    success_threshold: float = 0.90
    max_crp_budget: int = 100_000_000
    wall_clock_budget: float | None = 3600.0  # seconds per run
    master_seed: int = 0
    source: str = "uniform"
    max_epochs: int | None = None  # None: attack default

    def __post_init__(self):
        if self.puf_type not in ("cdc", "xor"):
            raise InvalidInputError(f"puf_type must be 'cdc' or 'xor', got {self.puf_type!r}")
        if self.attack not in _ATTACK_IDS:
            raise InvalidInputError(f"attack must be 'lr' or 'nn', got {self.attack!r}")
        if self.n < 1 or self.k < 1 or self.instance_count < 1:
            raise InvalidInputError("n, k and instance_count must be >= 1")
        if not 0.5 < self.success_threshold <= 1:
            raise InvalidInputError("success_threshold must lie in (0.5, 1]")
        self.training_sizes = [int(s) for s in self.training_sizes]
        if any(b <= a for a, b in zip(self.training_sizes, self.training_sizes[1:])):
            raise InvalidInputError("training_sizes must be strictly ascending")
        if any(s < 2 for s in self.training_sizes):
            raise InvalidInputError("training sizes must be >= 2")
        if self.source == "lcg" and self.puf_type == "xor":
            raise InvalidInputError("XOR PUF experiments use the uniform challenge source")

    @property
    def sizes(self):
        if self.training_sizes:
            return list(self.training_sizes)
        return default_training_sizes(self.max_crp_budget - _test_share(self.max_crp_budget))


@dataclass
class AttackReport:
    puf_type: str
    n: int
    k: int
    attack: str
    instance_id: int
    training_size: int
    test_accuracy: float | None
    converged: bool
    epochs: int
    wall_time: float
    seeds: dict
    success_threshold: float = 0.90
    master_seed: int = 0

    @property
    def success(self):
        return is_success(self.test_accuracy, self.converged, self.success_threshold)

    def record(self):
        """The deterministic part, as written to the results transcript."""
        d = {
            "kind": "attack_run",
            "pufType": self.puf_type, "n": self.n, "k": self.k, "attack": self.attack,
            "instanceId": self.instance_id, "trainingSize": self.training_size,
            "testAccuracy": self.test_accuracy, "converged": self.converged,
            "epochs": self.epochs, "seeds": self.seeds,
            "successThreshold": self.success_threshold, "masterSeed": self.master_seed,
        }
        return d

    def timing(self):
        return {"instanceId": self.instance_id, "trainingSize": self.training_size,
                "attack": self.attack, "wallTime": self.wall_time}

    @classmethod
    def from_record(cls, rec, wall_time=float("nan")):
        return cls(
            puf_type=rec["pufType"], n=rec["n"], k=rec["k"], attack=rec["attack"],
            instance_id=rec["instanceId"], training_size=rec["trainingSize"],
            test_accuracy=rec["testAccuracy"], converged=rec["converged"],
            epochs=rec["epochs"], wall_time=wall_time, seeds=rec["seeds"],
            success_threshold=rec["successThreshold"], master_seed=rec["masterSeed"],
        )


@dataclass
class SweepRow:
    puf_type: str
    n: int
    k: int
    attack: str
    training_size: int
    instances: int
    successes: int
    average_accuracy: float | None
    median_wall_time: float | None

    @property
    def success_rate(self):
        return self.successes / self.instances


@dataclass
class SweepSummary:
    rows: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    minimal_breaking_size: int | None = None
    budget_exhausted: bool = False

    @property
    def broken(self):
        return self.minimal_breaking_size is not None


def _test_share(total, train_frac=0.8):
    return math.floor((1 - Fraction(train_frac).limit_denominator(10**9)) * total)


def total_for_training_size(training_size, train_frac=0.8):
    """Largest dataset size whose train + validation part is ``training_size``.

    Taking the largest gives the held-out share its full 20%: 6000 -> 7500.
    """
    if training_size < 2:
        raise InvalidInputError("training size must be >= 2")
    f = Fraction(train_frac).limit_denominator(10**9)
    total = max(training_size, math.floor(training_size / f) - 2)
    while total - _test_share(total, train_frac) < training_size:
        total += 1
    while total + 1 - _test_share(total + 1, train_frac) == training_size:
        total += 1
    return total


class _StreamCache:
    """One growing challenge stream per instance; runs take prefixes of it."""

    def __init__(self, config):
        self.config = config
        self._sets = {}

    def puf(self, instance_id):
        c = self.config
        return sample_cdc_xpuf(c.n, c.k, derive_seed(c.master_seed, _TAG_PUF, instance_id))

    def crps(self, instance_id, count):
        have = self._sets.get(instance_id)
        if have is None or len(have) < count:
            c = self.config
            seed = derive_seed(c.master_seed, _TAG_CRP, instance_id)
            have = generate_crpset(self.puf(instance_id), count, c.source, seed,
                                   broadcast=c.puf_type == "xor")
            self._sets = {instance_id: have}  # keep one instance resident
        return have.head(count)


def _run_on_crps(crps, attack, seeds, max_epochs, wall_clock_budget):
    """Split, train and test. Returns ``(test_accuracy | None, converged, epochs)``."""
    train, val, test = split_crpset(crps, shuffle_seed=seeds["split"])
    kw = {"init_seed": seeds["init"], "shuffle_seed": seeds["shuffle"],
          "wall_clock_budget": wall_clock_budget}
    if max_epochs:
        kw["max_epochs"] = max_epochs
    try:
        if attack == "lr":
            model, rep = lr_train(train, val, LrTrainConfig(**kw))
            return lr_accuracy(model, test), True, rep.total_epochs
        model, rep = nn_train(train, val, NnTrainConfig(**kw))
        return nn_accuracy(model, test), True, rep.epochs
    except DivergedTrainingError as e:
        return None, False, e.epoch or 0


def run_seeds(master_seed, instance_id, training_size, attack):
    base = (_TAG_RUN, instance_id, training_size, _ATTACK_IDS[attack])
    return {name: derive_seed(master_seed, *base, i)
            for i, name in enumerate(("split", "init", "shuffle"))}


def run_attack_once(config, instance_id, training_size, cache=None):
    """Attack one instance with ``training_size`` train + validation CRPs.

    The held-out test share comes on top, so the dataset holds
    :func:`total_for_training_size` records drawn from the instance's stream.
    """
    import time

    total = total_for_training_size(training_size)
    if total > config.max_crp_budget:
        raise BudgetError(
            f"training size {training_size} needs {total} CRPs, budget is {config.max_crp_budget}"
        )
    cache = cache or _StreamCache(config)
    crps = cache.crps(instance_id, total)
    seeds = run_seeds(config.master_seed, instance_id, training_size, config.attack)
    t0 = time.perf_counter()
    acc, converged, epochs = _run_on_crps(
        crps, config.attack, seeds, config.max_epochs, config.wall_clock_budget
    )
    return AttackReport(
        puf_type=config.puf_type, n=config.n, k=config.k, attack=config.attack,
        instance_id=instance_id, training_size=training_size, test_accuracy=acc,
        converged=converged, epochs=epochs, wall_time=time.perf_counter() - t0,
        seeds=seeds, success_threshold=config.success_threshold,
        master_seed=config.master_seed,
    )


def summarize(reports, success_threshold=None):
    """Aggregate reports per (pufType, n, k, attack, trainingSize).

    Only successful runs enter the average accuracy. The result does not
    depend on the order of ``reports``.
    """
    groups = {}
    for r in reports:
        key = (r.puf_type, r.n, r.k, r.attack, r.training_size)
        groups.setdefault(key, []).append(r)
    rows = []
    for key in sorted(groups):
        runs = sorted(groups[key], key=lambda r: r.instance_id)
        ok = [r for r in runs if is_success(
            r.test_accuracy, r.converged,
            r.success_threshold if success_threshold is None else success_threshold,
        )]
        times = [r.wall_time for r in runs if not math.isnan(r.wall_time)]
        rows.append(SweepRow(
            *key, instances=len(runs), successes=len(ok),
            average_accuracy=statistics.fmean(r.test_accuracy for r in ok) if ok else None,
            median_wall_time=statistics.median(times) if times else None,
        ))
    return rows


def run_sweep(config, on_report=None):
    """Run every instance at each training size until 90% of them are broken.

    Sizes whose dataset would exceed ``max_crp_budget`` are not run; if that
    happens before a breaking size is found the summary is marked
    ``budget_exhausted``.
    """
    summary = SweepSummary()
    cache = _StreamCache(config)
    for size in config.sizes:
        if total_for_training_size(size) > config.max_crp_budget:
            summary.budget_exhausted = True
            break
        batch = []
        for inst in range(config.instance_count):
            rep = run_attack_once(config, inst, size, cache)
            batch.append(rep)
            if on_report:
                on_report(rep)
        summary.reports.extend(batch)
        if sum(r.success for r in batch) / len(batch) >= 0.9:
            summary.minimal_breaking_size = size
            break
    else:
        summary.budget_exhausted = summary.minimal_breaking_size is None
    summary.rows = summarize(summary.reports)
    return summary


def dumps_record(rec):
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_results(reports, path):
    """Write the transcript (``path``) and wall times (``<path>.timing.jsonl``)."""
    path = Path(path)
    with open(path, "w") as fh:
        for r in reports:
            fh.write(dumps_record(r.record()) + "\n")
    with open(timing_path(path), "w") as fh:
        for r in reports:
            fh.write(dumps_record(r.timing()) + "\n")


def timing_path(path):
    path = Path(path)
    return path.with_name(path.name + ".timing.jsonl")


def read_results(path):
    path = Path(path)
    times = {}
    tp = timing_path(path)
    if tp.exists():
        for line in tp.read_text().splitlines():
            if line.strip():
                t = json.loads(line)
                times[(t["instanceId"], t["trainingSize"], t["attack"])] = t["wallTime"]
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("kind") != "attack_run":
            continue
        key = (rec["instanceId"], rec["trainingSize"], rec["attack"])
        out.append(AttackReport.from_record(rec, times.get(key, float("nan"))))
    return out


def _row_values(row):
    return {
        "pufType": row.puf_type, "n": row.n, "k": row.k, "attack": row.attack,
        "trainingSize": row.training_size, "averageAccuracy": row.average_accuracy,
        "successRate": row.success_rate, "medianWallTime": row.median_wall_time,
    }


def _fmt_seconds(t):
    if t is None:
        return "-"
    if t < 60:
        return f"{t:.1f} s"
    if t < 3600:
        return f"{t / 60:.1f} min"
    return f"{t / 3600:.1f} h"


def emit_report(summary_or_rows, fmt="table"):
    """Render sweep rows as ``table``, ``csv`` or ``jsonl`` text."""
    rows = summary_or_rows.rows if isinstance(summary_or_rows, SweepSummary) else summary_or_rows
    values = [_row_values(r) for r in rows]
    if fmt == "jsonl":
        return "".join(dumps_record(v) + "\n" for v in values)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for v in values:
            w.writerow({c: "" if v[c] is None else v[c] for c in REPORT_COLUMNS})
        return buf.getvalue()
    if fmt != "table":
        raise InvalidInputError(f"unknown report format {fmt!r}")
    cells = [REPORT_COLUMNS]
    for v in values:
        avg = v["averageAccuracy"]
        cells.append([
            v["pufType"], str(v["n"]), str(v["k"]), v["attack"], str(v["trainingSize"]),
            "No convergence" if avg is None else f"{avg:.1%}",
            f"{v['successRate']:.0%}", _fmt_seconds(v["medianWallTime"]),
        ])
    widths = [max(len(row[i]) for row in cells) for i in range(len(REPORT_COLUMNS))]
    return "".join(
        "  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n" for row in cells
    )


def parse_report_csv(text):
    """Inverse of the csv report, for reading rows back."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({
            "pufType": rec["pufType"], "n": int(rec["n"]), "k": int(rec["k"]),
            "attack": rec["attack"], "trainingSize": int(rec["trainingSize"]),
            "averageAccuracy": float(rec["averageAccuracy"]) if rec["averageAccuracy"] else None,
            "successRate": float(rec["successRate"]),
            "medianWallTime": float(rec["medianWallTime"]) if rec["medianWallTime"] else None,
        })
    return rows


_CONFIG_ALIASES = {
    "pufType": "puf_type", "instanceCount": "instance_count",
    "trainingSizes": "training_sizes", "successThreshold": "success_threshold",
    "maxCrpBudget": "max_crp_budget", "wallClockBudget": "wall_clock_budget",
    "masterSeed": "master_seed", "seed": "master_seed", "maxEpochs": "max_epochs",
}


def _convert(name, raw):
    raw = raw.strip()
    if name == "training_sizes":
        return [int(float(s)) for s in raw.replace(",", " ").split()]
    if name in ("puf_type", "attack", "source"):
        return raw
    if raw.lower() in ("", "none", "null"):
        return None
    if name in ("success_threshold", "wall_clock_budget"):
        return float(raw)
    return int(float(raw))


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment. Returns a field dict."""
    known = {f.name for f in fields(ExperimentConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        name = _CONFIG_ALIASES.get(key, key.replace("-", "_"))
        if name not in known:
            raise InvalidInputError(f"config line {lineno}: unknown key {key!r}")
        out[name] = _convert(name, value)
    return out


def load_config(path=None, **overrides):
    values = parse_config_text(Path(path).read_text()) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**values)


def config_to_dict(config):
    return asdict(config)
