"""Run reports: machine-readable records, human tables, per-step traces.

Canonical report files are byte-deterministic for a given (config, seed):
float fields are written with ``repr`` so parsing recovers them exactly,
and volatile wall-clock timings live in a separate ``timings.txt`` sidecar
that is excluded from determinism comparisons.
"""

import math
import os
from dataclasses import dataclass, field, replace

from dpfine.errors import ConfigError

SCHEMA_VERSION = "1"

REFERENCE_LABEL = "paper-reported, not reproduced"

# Published top-1 accuracies (%) for DP fine-tuning of an
# ImageNet-pretrained Wide-ResNet-28-10, reported for context only; desk
# scale cannot reproduce them.
PUBLISHED_REFERENCE = {
    "CIFAR-10": {
        "whole_model": {1.0: 94.7, 2.0: 95.4, 4.0: 96.1, 8.0: 96.7},
        "last_layer": {1.0: 93.1, 2.0: 93.6, 4.0: 94.0, 8.0: 94.2},
        "first_last_layers": {1.0: 95.0, 2.0: 95.6, 4.0: 96.1, 8.0: 96.4},
    },
    "CIFAR-100": {
        "whole_model": {1.0: 70.3, 2.0: 74.7, 4.0: 79.2, 8.0: 81.8},
        "last_layer": {1.0: 70.3, 2.0: 73.9, 4.0: 76.1, 8.0: 77.6},
        "first_last_layers": {1.0: 73.7, 2.0: 77.9, 4.0: 81.0, 8.0: 82.1},
    },
}

_RECORD_FIELDS = {
    "strategy": str,
    "epsilon_target": float,
    "epsilon_realized": float,
    "delta": float,
    "sigma": float,
    "trainable_params": int,
    "total_params": int,
    "accuracy_ema": float,
    "accuracy_raw": float,
    "steps": int,
    "sampling_rate": float,
    "clip_norm": float,
    "seed": int,
    "non_private": int,
    "status": str,
}


@dataclass
class RunRecord:
    """One (strategy, epsilon) cell of a sweep."""

    strategy: str
    epsilon_target: float
    epsilon_realized: float
    delta: float
    sigma: float
    trainable_params: int
    total_params: int
    accuracy_ema: float
    accuracy_raw: float
    steps: int
    sampling_rate: float
    clip_norm: float
    seed: int
    non_private: int = 0
    status: str = "ok"
    wall_time_s: float = 0.0
    trace: list = field(default_factory=list, compare=False, repr=False)


@dataclass
class RunReport:
    """A full sweep: header metadata plus per-cell records."""

    dataset: str
    base_seed: int
    records: list = field(default_factory=list)
    schema_version: str = SCHEMA_VERSION
    pretrain_accuracy: float = None


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit(report, out_dir):
    """Write records.txt, table.txt, traces and the timings sidecar.

    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    records_path = os.path.join(out_dir, "records.txt")
    lines = [
        f"schema_version={report.schema_version}",
        f"dataset={report.dataset}",
        f"base_seed={report.base_seed}",
    ]
    if report.pretrain_accuracy is not None:
        lines.append(f"pretrain_accuracy={report.pretrain_accuracy!r}")
    lines.append(f"record_count={len(report.records)}")
    for rec in report.records:
        lines.append("[record]")
        for name in _RECORD_FIELDS:
            lines.append(f"{name}={_fmt(getattr(rec, name))}")
    with open(records_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    written.append(records_path)

    table_path = os.path.join(out_dir, "table.txt")
    with open(table_path, "w") as f:
        f.write(render_table(report))
    written.append(table_path)

    for rec in report.records:
        if not rec.trace:
            continue
        trace_path = os.path.join(out_dir, f"trace_{_slug(rec)}.txt")
        with open(trace_path, "w") as f:
            f.write("# step epsilon_spent train_loss\n")
            for step, eps, loss in rec.trace:
                f.write(f"{step} {eps!r} {loss!r}\n")
        written.append(trace_path)

    timings_path = os.path.join(out_dir, "timings.txt")
    with open(timings_path, "w") as f:
        f.write("# volatile wall-clock times, excluded from determinism checks\n")
        for rec in report.records:
            f.write(f"{_slug(rec)} wall_time_s={rec.wall_time_s!r}\n")
    return written


def _slug(rec):
    eps = "inf" if math.isinf(rec.epsilon_target) else f"{rec.epsilon_target:g}"
    return f"{rec.strategy}_eps{eps}"


def parse(out_dir):
    """Inverse of emit(); reconstructs the RunReport (traces included)."""
    records_path = os.path.join(out_dir, "records.txt")
    with open(records_path) as f:
        lines = [line.rstrip("\n") for line in f]

    header = {}
    blocks = []
    current = None
    for line in lines:
        if line == "[record]":
            current = {}
            blocks.append(current)
            continue
        if "=" not in line:
            raise ConfigError(f"{records_path}: malformed line {line!r}")
        key, value = line.split("=", 1)
        (current if current is not None else header)[key] = value

    if header.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"{records_path}: schema_version {header.get('schema_version')!r}"
            f" unsupported (expected {SCHEMA_VERSION!r})"
        )
    if int(header["record_count"]) != len(blocks):
        raise ConfigError(f"{records_path}: record_count does not match records")

    report = RunReport(
        dataset=header["dataset"],
        base_seed=int(header["base_seed"]),
        schema_version=header["schema_version"],
        pretrain_accuracy=(
            float(header["pretrain_accuracy"]) if "pretrain_accuracy" in header else None
        ),
    )
    for block in blocks:
        kwargs = {name: typ(block[name]) for name, typ in _RECORD_FIELDS.items()}
        report.records.append(RunRecord(**kwargs))

    timings_path = os.path.join(out_dir, "timings.txt")
    timings = {}
    if os.path.exists(timings_path):
        with open(timings_path) as f:
            for line in f:
                if line.startswith("#") or not line.strip():
                    continue
                slug, kv = line.split(" ", 1)
                timings[slug] = float(kv.split("=", 1)[1])
    for i, rec in enumerate(report.records):
        if _slug(rec) in timings:
            report.records[i] = replace(rec, wall_time_s=timings[_slug(rec)])
        trace_path = os.path.join(out_dir, f"trace_{_slug(rec)}.txt")
        if os.path.exists(trace_path):
            with open(trace_path) as f:
                trace = [
                    (int(s), float(e), float(l))
                    for s, e, l in (
                        line.split() for line in f if not line.startswith("#")
                    )
                ]
            report.records[i] = replace(report.records[i], trace=trace)
    return report


def render_table(report):
    """Aligned accuracy table, strategies as rows and epsilon as columns,
    followed by the published reference block."""
    eps_values = sorted({r.epsilon_target for r in report.records})
    strategies = []
    for r in report.records:
        if r.strategy not in strategies:
            strategies.append(r.strategy)
    by_cell = {(r.strategy, r.epsilon_target): r for r in report.records}

    def eps_label(e):
        return "eps=inf" if math.isinf(e) else f"eps={e:g}"

    width = 22
    col = 16
    out = []
    out.append(f"dataset: {report.dataset}   (desk-scale run, accuracy in %)")
    if report.pretrain_accuracy is not None:
        out.append(f"pretrain accuracy (public holdout): {100 * report.pretrain_accuracy:.1f}%")
    out.append("")
    header = "strategy".ljust(width) + "trainable_d".rjust(12)
    header += "".join(eps_label(e).rjust(col) for e in eps_values)
    out.append(header)
    out.append("-" * len(header))
    for s in strategies:
        any_rec = next(r for r in report.records if r.strategy == s)
        line = s.ljust(width) + str(any_rec.trainable_params).rjust(12)
        for e in eps_values:
            rec = by_cell.get((s, e))
            if rec is None:
                cell = "-"
            elif rec.status != "ok":
                cell = "FAILED"
            else:
                cell = f"{100 * rec.accuracy_ema:.1f}/{100 * rec.accuracy_raw:.1f}"
            line += cell.rjust(col)
        out.append(line)
    out.append("")
    out.append("cells are accuracy_ema/accuracy_raw; realized epsilon <= target in every cell")
    out.append("")
    out.append(f"reference results ({REFERENCE_LABEL}), Wide-ResNet-28-10 pretrained on ImageNet:")
    for ds, table in PUBLISHED_REFERENCE.items():
        out.append(f"  {ds}:")
        for strat, vals in table.items():
            cells = "  ".join(f"eps={e:g}: {v:.1f}" for e, v in sorted(vals.items()))
            out.append(f"    {strat:<20} {cells}")
    return "\n".join(out) + "\n"
