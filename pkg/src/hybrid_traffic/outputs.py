"""Writing run results as delimited text files."""

from __future__ import annotations

import csv
import os
from pathlib import Path

from .engine import RunOutput

SENSOR_HEADER = ["t_start_s", "t_end_s", "flow_veh_per_h", "mean_speed_m_per_s", "count_veh"]
UNIT_HEADER = ["t_s", "density_veh_per_km_per_lane", "speed_km_per_h", "flow_veh_per_h", "vehicles", "representation"]
LEDGER_HEADER = [
    "t_s",
    "micro_veh",
    "macro_veh",
    "queued_veh",
    "fractional_veh",
    "departed_veh",
    "injected_veh",
    "rounding_veh",
    "residual_veh",
    "balanced",
]


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_outputs(output: RunOutput, directory: str | os.PathLike, sensors=(), units=()) -> list[Path]:
    """Write every series; ``sensors``/``units`` name series that must
    exist even when empty (header-only files)."""
    out_dir = Path(directory)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc.strerror}") from exc
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")
    written = []

    for sid in sorted(set(sensors) | set(output.sensors)):
        path = out_dir / f"sensor.{sid}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SENSOR_HEADER)
            for r in output.sensors.get(sid, ()):
                w.writerow([_fmt(r.t_start), _fmt(r.t_end), _fmt(r.flow), _fmt(r.speed), _fmt(r.count)])
        written.append(path)

    for uid in sorted(set(units) | set(output.units)):
        path = out_dir / f"segments.{uid}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(UNIT_HEADER)
            for r in output.units.get(uid, ()):
                w.writerow([_fmt(r.t), _fmt(r.density), _fmt(r.speed), _fmt(r.flow), _fmt(r.vehicles), r.representation])
        written.append(path)

    path = out_dir / "commands.log"
    with open(path, "w") as fh:
        for t, cmd in output.commands:
            fh.write(f"{t:.1f} {cmd.describe()}\n")
        for t, cmd, why in output.failed_commands:
            fh.write(f"{t:.1f} FAILED {cmd.describe()} ({why})\n")
    written.append(path)

    path = out_dir / "ledger.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_HEADER)
        for r in output.ledger:
            w.writerow(
                [
                    _fmt(r.t),
                    r.micro,
                    _fmt(r.macro),
                    r.queued,
                    _fmt(r.fractional),
                    _fmt(r.departed),
                    _fmt(r.injected),
                    _fmt(r.rounding),
                    _fmt(r.residual),
                    int(r.balanced),
                ]
            )
    written.append(path)
    return written
