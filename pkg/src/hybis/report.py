"""Headless scenario replay with files an operator can keep.

Runs the closed loop for a fixed number of steps while sampling the carved
process table, then writes the event log (JSON lines), the final compared
view (CSV), and a pair of figures: per-process tick progress over time and
disk traffic per checkpoint.  A blocked process shows up as a flat tick
line, which is the whole point of the picture.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import introspect
from .errors import KernelDebugBlockNotFound
from .monitor import Monitor, events_to_jsonl


@dataclass
class ReportBundle:
    out_dir: Path
    events_path: Path
    table_path: Path
    ticks_figure: Path
    io_figure: Path
    files: list[Path] = field(default_factory=list)


def run_report(monitor: Monitor, out_dir: str | Path, steps: int, sample_every: int = 4) -> ReportBundle:
    """Drive the monitor for `steps` and render the artifacts into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    guest = monitor.guest
    profile = monitor.profile
    port = monitor.port

    samples: list[tuple[int, dict[int, int]]] = []  # (step, {pid: ticks})
    names: dict[int, str] = {}
    remaining = steps
    while remaining > 0:
        chunk = min(sample_every, remaining)
        monitor.run(chunk)
        remaining -= chunk
        try:
            hits = introspect.scan_processes(port, profile)
        except KernelDebugBlockNotFound:
            continue
        samples.append((guest.clock, {h.pid: h.ticks for h in hits}))
        for h in hits:
            names.setdefault(h.pid, h.name)

    events_path = out / "events.jsonl"
    events_path.write_text(events_to_jsonl(monitor.events) + "\n", encoding="utf-8")

    table_path = out / "processes.csv"
    try:
        report = introspect.cross_view(port, profile, source_description="live")
        records = report.records
    except KernelDebugBlockNotFound:
        records = []
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["address", "pid", "name", "state", "ticks", "scan", "track", "sched", "classification"]
        )
        for r in records:
            writer.writerow(
                [
                    f"0x{r.address:x}",
                    r.pid,
                    r.name,
                    r.state,
                    r.ticks,
                    int(r.found_by_scan),
                    int(r.in_tracking),
                    int(r.in_sched),
                    r.classification.value,
                ]
            )

    ticks_figure = out / "ticks_timeline.png"
    _plot_ticks(samples, names, ticks_figure)
    io_figure = out / "checkpoint_io.png"
    _plot_checkpoint_io(monitor, io_figure)

    (out / "summary.json").write_text(
        json.dumps(
            {
                "steps": guest.clock,
                "events": len(monitor.events),
                "records": len(records),
                "findings": [f.to_json() for f in monitor.findings.values()],
            },
            indent=2,
        ),
        encoding="utf-8",
    )

    return ReportBundle(
        out_dir=out,
        events_path=events_path,
        table_path=table_path,
        ticks_figure=ticks_figure,
        io_figure=io_figure,
        files=sorted(out.iterdir()),
    )


def _plot_ticks(samples, names: dict[int, str], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    by_pid: dict[int, tuple[list[int], list[int]]] = {}
    for step, ticks in samples:
        for pid, value in ticks.items():
            xs, ys = by_pid.setdefault(pid, ([], []))
            xs.append(step)
            ys.append(value)
    for pid, (xs, ys) in sorted(by_pid.items()):
        ax.plot(xs, ys, label=f"{names.get(pid, '?')} ({pid})")
    ax.set_xlabel("step")
    ax.set_ylabel("scheduler ticks")
    ax.set_title("Per-process tick progress (flat line = not scheduled)")
    if by_pid:
        ax.legend(fontsize=8, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_checkpoint_io(monitor: Monitor, path: Path) -> None:
    labels: list[str] = []
    written: list[int] = []
    manifests = [w.spec.manifest for w in monitor._watches.values()]
    if monitor.boot_manifest is not None:
        manifests.append(monitor.boot_manifest)
    for manifest in manifests:
        for cp in manifest.checkpoints:
            span = sum(l for _, l, _ in cp.ranges)
            # checkpoint 0 is the base image itself
            volume = manifest.memory_size if cp.id == 0 else 2 * span
            labels.append(f"{Path(manifest.base_path).stem}:{cp.id}")
            written.append(volume)
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if written:
        ax.bar(range(len(written)), [v / 1024 / 1024 for v in written], color="#4477aa")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("MiB written")
    ax.set_title("Disk traffic per checkpoint (base dump vs range updates)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
