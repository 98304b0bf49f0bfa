"""Monospace tables and CSV files for count reports, AP results and check runs."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

from rsnet.errors import DataError
from rsnet.metrics import APResult
from rsnet.model import CountReport

DIVIDER = "─"


def _table(header: str, rows: Iterable[str], footer: Iterable[str] = ()) -> str:
    divider = DIVIDER * len(header)
    lines = [header, divider, *rows]
    footer = list(footer)
    if footer:
        lines += [divider, *footer]
    return "\n".join(lines)


def _shape(shape) -> str:
    return "x".join(str(s) for s in shape)


def _giga(value: int) -> str:
    return f"{value / 1e9:.3f}G"


def count_table(report: CountReport) -> str:
    header = f"{'Layer':<36s} {'Kind':<16s} {'Params':>10} {'MACs':>14} {'Output':>14}"
    rows = []
    for row in report.rows:
        name = row.name + (" (shared)" if row.shared else "")
        rows.append(
            f"{name[:36]:<36s} {row.kind[:16]:<16s} {row.params:>10,d} {row.macs:>14,d} {_shape(row.out_shape):>14}"
        )
    height, width = report.input_size
    footer = [
        f"{'Total':<36s} {'':<16s} {report.total_params:>10,d} {report.total_macs:>14,d}",
        f"{report.config} at {height}x{width}: {report.total_params / 1e6:.3f}M params, "
        f"{_giga(report.total_macs)} MACs, {_giga(report.total_flops)} FLOPs (FLOPs = 2 x MACs; convs and norms, activations ignored)",
    ]
    return _table(header, rows, footer)


def ablation_table(reports: Sequence[CountReport]) -> str:
    header = f"{'Config':<18s} {'Params':>12} {'MACs':>10} {'FLOPs':>10}"
    rows = [
        f"{r.config[:18]:<18s} {r.total_params:>12,d} {_giga(r.total_macs):>10} {_giga(r.total_flops):>10}"
        for r in reports
    ]
    return _table(header, rows)


def ap_table(result: APResult) -> str:
    header = f"{'Class':>5} {'GT':>6} {'AP50':>7} {'AP75':>7} {'AP50-95':>8}"
    rows = []
    at75 = result.thresholds.index(0.75) if 0.75 in result.thresholds else None
    for cls, aps in sorted(result.per_class.items()):
        ap75 = f"{aps[at75]:>7.4f}" if at75 is not None else f"{'-':>7}"
        rows.append(f"{cls:>5} {result.num_truth.get(cls, 0):>6} {aps[0]:>7.4f} {ap75} {sum(aps) / len(aps):>8.4f}")
    footer = [
        f"mAP50 {result.map50:.4f}  mAP50-95 {result.map50_95:.4f}  (all-point interpolation, greedy matching)",
    ]
    return _table(header, rows, footer)


def check_table(results) -> str:
    header = f"{'Check':<40s} {'Result':<6s} Detail"
    rows = [f"{r.name[:40]:<40s} {'ok' if r.ok else 'FAIL':<6s} {r.detail}" for r in results]
    return _table(header, rows)


def _write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[object]]) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as err:
        raise DataError(f"cannot write {path}: {err.strerror or err}") from err
    return path


def write_count_csv(report: CountReport, path: str | Path) -> Path:
    rows = [[r.name, r.kind, r.params, r.macs, _shape(r.out_shape), int(r.shared)] for r in report.rows]
    rows.append(["total", "", report.total_params, report.total_macs, "", ""])
    return _write_csv(path, ("layer", "kind", "params", "macs", "output", "shared"), rows)


def write_ap_csv(result: APResult, path: str | Path) -> Path:
    header = ["class", "num_truth", *(f"ap{round(t * 100)}" for t in result.thresholds), "ap50_95"]
    rows = [
        [cls, result.num_truth.get(cls, 0), *(f"{ap:.6f}" for ap in aps), f"{sum(aps) / len(aps):.6f}"]
        for cls, aps in sorted(result.per_class.items())
    ]
    rows.append(["all", sum(result.num_truth.values()), *(f"{result.mean_at(i):.6f}" for i in range(len(result.thresholds))),
                 f"{result.map50_95:.6f}"])
    return _write_csv(path, header, rows)


def tuning_table(result, limit: int = 10) -> str:
    """Candidates nearest the parameter target first."""
    header = f"{'Stage top':>9} {'Neck widths':<14s} {'Head':>5} {'Params':>12} {'Gap':>10} {'FLOPs':>9}"
    ranked = sorted(result.candidates, key=lambda c: c.gap(result.target))[:limit]
    rows = [
        f"{c.stage_top:>9} {','.join(map(str, c.neck_widths)):<14s} {c.head_hidden:>5} "
        f"{c.params:>12,d} {c.params - result.target:>+10,d} {_giga(c.flops):>9}"
        for c in ranked
    ]
    return _table(header, rows, [f"target {result.target:,} params; {len(result.candidates)} grid points counted"])
