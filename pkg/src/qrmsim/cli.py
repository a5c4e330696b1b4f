"""Command-line front end: ``run``, ``analyze``, ``oracle`` and ``plot``.

Every CSV written here has a ``.meta.json`` sidecar next to it holding the
column units, the force sign convention and the fully resolved run
configuration. Numbers are written with ``repr`` so they re-parse to the
identical double.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from qrmsim.errors import ConfigError, GeometryError, QrmError
from qrmsim.integrator import SimConfig, simulate
from qrmsim.mechanism import CHANNELS, COLUMNS
from qrmsim.scenario import (
    COUPLING_DEFAULTS,
    LINK_DEFAULTS,
    CouplingParams,
    DriveParams,
    LinkParams,
    QrmGeometry,
    build_quick_return,
    oracle_sweep,
    stroke_analysis,
    theoretical_time_ratio,
)

SIGN_CONVENTION = (
    "Each force channel is the force exerted ON the named link BY the joint, "
    "in world coordinates. Tc is the drive torque on the crank about +z. "
    "Angles are counter-clockwise about +z."
)

ORACLE_CHANNELS = [
    ("theta", "rad", "crank angle"),
    ("psi", "rad", "rocker angle from +x"),
    ("tip_x", "m", "rocker tip x"),
    ("tip_y", "m", "rocker tip y"),
    ("slider_x", "m", "slider-2 x"),
]

_UMASK = os.umask(0)
os.umask(_UMASK)

# link lengths that are fixed by the geometry section
_LENGTH_KEYS = {"crank": "crank_radius", "rocker": "rocker_length", "rod": "rod_length"}


@dataclass
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    geometry: QrmGeometry = field(default_factory=QrmGeometry)
    links: dict[str, LinkParams] = field(default_factory=lambda: dict(LINK_DEFAULTS))
    couplings: dict[str, CouplingParams] = field(default_factory=lambda: dict(COUPLING_DEFAULTS))
    drive: DriveParams = field(default_factory=DriveParams)
    gravity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sliding_friction: bool = False
    output: dict[str, str] = field(default_factory=lambda: {"csv": "run.csv"})

    def to_dict(self) -> dict:
        return {
            "sim": asdict(self.sim),
            "geometry": asdict(self.geometry),
            "links": {k: asdict(v) for k, v in self.links.items()},
            "couplings": {k: asdict(v) for k, v in self.couplings.items()},
            "drive": asdict(self.drive),
            "gravity": list(self.gravity),
            "sliding_friction": self.sliding_friction,
            "output": dict(self.output),
        }

    def build(self):
        return build_quick_return(
            self.links, self.couplings, self.geometry, self.drive, self.gravity,
            self.sliding_friction,
        )


# ---------------------------------------------------------------- config


def _number(value, path, *, positive=False, integer=False, nonneg=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        value = int(value)
    elif not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    if positive and not value > 0:
        raise ConfigError(f"{path}: must be positive, got {value!r}")
    if nonneg and not value >= 0:
        raise ConfigError(f"{path}: must be non-negative, got {value!r}")
    return value if integer else float(value)


def _section(doc, path, allowed):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}: unknown key")
    return doc


def _override(default, doc, path, **checks):
    """Replace dataclass fields of ``default`` from ``doc``, validating each."""
    names = [f.name for f in fields(default)]
    _section(doc, path, names)
    values = {}
    for key, v in doc.items():
        values[key] = _number(v, f"{path}.{key}", **checks.get(key, {"positive": True}))
    return replace(default, **values)


def parse_config(document: str | dict) -> RunConfig:
    """Resolve a JSON configuration document against the defaults.

    Every error names the path of the offending key, e.g.
    ``geometry.pivot_distance``.
    """
    if isinstance(document, str):
        try:
            doc = json.loads(document) if document.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed configuration: {exc}") from None
    else:
        doc = document
    _section(doc, "config", [f.name for f in fields(RunConfig)])
    cfg = RunConfig()

    sim_doc = _section(doc.get("sim", {}), "sim", [f.name for f in fields(SimConfig)])
    sim_checks = {
        "dt": {"positive": True},
        "t_end": {"positive": True},
        "record_stride": {"positive": True, "integer": True},
        "renormalize_stride": {"positive": True, "integer": True},
    }
    try:
        cfg.sim = _override(SimConfig(), sim_doc, "sim", **sim_checks)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"sim: {exc}") from None

    geom_doc = _section(doc.get("geometry", {}), "geometry", [f.name for f in fields(QrmGeometry)])
    geom_checks = {"initial_crank_angle": {}, "slider_line_y": {}}
    geom = _override(QrmGeometry(), geom_doc, "geometry", **geom_checks)

    links_doc = _section(doc.get("links", {}), "links", list(LINK_DEFAULTS))
    links = dict(LINK_DEFAULTS)
    for name, sub in links_doc.items():
        path = f"links.{name}"
        links[name] = _override(links[name], sub, path)
        gkey = _LENGTH_KEYS.get(name)
        if gkey and "lx" in sub:
            if gkey in geom_doc and geom_doc[gkey] != sub["lx"]:
                raise ConfigError(f"{path}.lx: disagrees with geometry.{gkey}")
            geom = replace(geom, **{gkey: links[name].lx})
    for name, gkey in _LENGTH_KEYS.items():
        links[name] = replace(links[name], lx=getattr(geom, gkey))
    try:
        cfg.geometry = geom.validate()
    except GeometryError as exc:
        raise ConfigError(f"geometry: {exc}") from None
    cfg.links = links

    cp_doc = _section(doc.get("couplings", {}), "couplings", list(COUPLING_DEFAULTS))
    couplings = dict(COUPLING_DEFAULTS)
    nonneg = {"nonneg": True}
    for name, sub in cp_doc.items():
        couplings[name] = _override(
            couplings[name], sub, f"couplings.{name}", stiffness=nonneg, damping=nonneg
        )
    cfg.couplings = couplings

    cfg.drive = _override(
        DriveParams(), doc.get("drive", {}), "drive", rate={}, K_C=nonneg, R_C=nonneg
    )

    if "gravity" in doc:
        g = doc["gravity"]
        if not isinstance(g, list) or len(g) != 3:
            raise ConfigError("gravity: expected a list of 3 numbers")
        cfg.gravity = tuple(_number(v, f"gravity[{i}]") for i, v in enumerate(g))

    if "sliding_friction" in doc:
        if not isinstance(doc["sliding_friction"], bool):
            raise ConfigError("sliding_friction: expected true or false")
        cfg.sliding_friction = doc["sliding_friction"]

    out_doc = _section(doc.get("output", {}), "output", ["csv"])
    for key, v in out_doc.items():
        if not isinstance(v, str) or not v:
            raise ConfigError(f"output.{key}: expected a non-empty path string")
        cfg.output[key] = v
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


# ---------------------------------------------------------------- files


def meta_path(csv_path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".meta.json")


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_csv(header, rows) -> str:
    lines = [",".join(header)]
    lines.extend(",".join(repr(float(v)) for v in row) for row in rows)
    return "\n".join(lines) + "\n"


def write_table(path, channels, rows, kind: str, config: RunConfig, extra=None) -> None:
    header = [c[0] for c in channels]
    meta = {
        "kind": kind,
        "columns": [{"name": n, "unit": u, "description": d} for n, u, d in channels],
        "sign_convention": SIGN_CONVENTION,
        "config": config.to_dict(),
    }
    meta.update(extra or {})
    atomic_write(path, format_csv(header, rows))
    atomic_write(meta_path(path), json.dumps(meta, indent=2) + "\n")


def read_table(path):
    """Return ``(columns dict, meta)``; refuses a CSV without its sidecar."""
    mp = meta_path(path)
    if not mp.exists():
        raise ConfigError(f"{path}: missing metadata sidecar {mp.name}")
    meta = json.loads(mp.read_text(encoding="utf-8"))
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    data = data.reshape(-1, len(header))
    return {name: data[:, i] for i, name in enumerate(header)}, meta


# ---------------------------------------------------------------- commands


def run(config: RunConfig, out=None, stream=sys.stdout) -> Path:
    path = Path(out or config.output["csv"])
    m, s0 = config.build()
    t0 = time.perf_counter()
    ts = simulate(m, s0, config.sim)
    table = ts.table
    wall = time.perf_counter() - t0
    write_table(path, CHANNELS, table, "run", config, {"steps": config.sim.n_steps})
    final = table[-1, COLUMNS.index("crank_angle")]
    print(
        f"steps {config.sim.n_steps}  wall {wall:.2f} s  final crank angle {final:.6f} rad"
        f"  -> {path}",
        file=stream,
    )
    return path


def _slider_series(cols, meta):
    if "t" in cols and "rC5x" in cols:
        return cols["t"], cols["rC5x"]
    if meta.get("kind") == "oracle":
        # one revolution at constant crank speed; tile it to get a full cycle of reversals
        rate = float(meta["config"]["drive"]["rate"])
        theta, x = cols["theta"], cols["slider_x"]
        period = 2.0 * math.pi / abs(rate)
        t = (theta - theta[0]) / abs(rate)
        return np.concatenate([t, t + period]), np.concatenate([x, x])
    raise ConfigError("table has neither t/rC5x nor an oracle sweep")


def analyze(csv_path, cutoff: float, out=None, stream=sys.stdout) -> dict:
    cols, meta = read_table(csv_path)
    config = parse_config(meta.get("config", {}))
    t, x = _slider_series(cols, meta)
    report = stroke_analysis(t, x, cutoff).to_dict()
    g = config.geometry
    report["theoretical_time_ratio"] = theoretical_time_ratio(g.crank_radius, g.pivot_distance)
    path = Path(out) if out else Path(csv_path).with_suffix(".report.json")
    atomic_write(path, json.dumps(report, indent=2) + "\n")
    print(
        f"forward {report['forward_duration_s']:.5f} s  return {report['return_duration_s']:.5f} s"
        f"  ratio {report['time_ratio']:.4f} (theory {report['theoretical_time_ratio']:.4f})"
        f"  stroke {report['stroke_length_m']:.5f} m  -> {path}",
        file=stream,
    )
    return report


def oracle(config: RunConfig, n_samples: int, out) -> Path:
    theta, psi, tip, x = oracle_sweep(config.geometry, n_samples)
    rows = np.column_stack([theta, psi, tip[:, 0], tip[:, 1], x])
    path = Path(out)
    write_table(path, ORACLE_CHANNELS, rows, "oracle", config)
    return path


def plot(csv_path, channels, out, x: str = "t") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not channels:
        raise ConfigError("plot needs at least one channel")
    cols, meta = read_table(csv_path)
    units = {c["name"]: c["unit"] for c in meta.get("columns", [])}
    for name in [x, *channels]:
        if name not in cols:
            raise ConfigError(f"unknown channel {name!r}")
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in channels:
        ax.plot(cols[x], cols[name], label=name, linewidth=1.0)
    ax.set_xlabel(f"{x} [{units.get(x, '?')}]")
    ylabels = sorted({units.get(n, "?") for n in channels})
    ax.set_ylabel(", ".join(channels) + f" [{', '.join(ylabels)}]")
    ax.grid(True, linewidth=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(out)
    with tempfile.NamedTemporaryFile(dir=path.parent or ".", suffix=".svg", delete=False) as fh:
        tmp = fh.name
    try:
        fig.savefig(tmp, format="svg")
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qrmsim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate and write the probe CSV")
    p.add_argument("--config", help="JSON configuration document")
    p.add_argument("--out", help="output CSV (default: output.csv from the config)")

    p = sub.add_parser("analyze", help="stroke timing of a run or oracle CSV")
    p.add_argument("csv")
    p.add_argument("--cutoff", type=float, default=2.0, help="ignore t < cutoff [s]")
    p.add_argument("--out", help="report JSON (default: <csv>.report.json)")

    p = sub.add_parser("oracle", help="rigid-link kinematic sweep over one revolution")
    p.add_argument("--config", help="JSON configuration document")
    p.add_argument("-n", "--samples", type=int, default=3600)
    p.add_argument("--out", default="oracle.csv")

    p = sub.add_parser("plot", help="SVG plot of CSV channels")
    p.add_argument("csv")
    p.add_argument("channels", nargs="+")
    p.add_argument("--x", default="t", help="x-axis channel")
    p.add_argument("--out", default="plot.svg")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            run(load_config(args.config), args.out)
        elif args.command == "analyze":
            analyze(args.csv, args.cutoff, args.out)
        elif args.command == "oracle":
            oracle(load_config(args.config), args.samples, args.out)
        else:
            plot(args.csv, args.channels, args.out, args.x)
    except (QrmError, ValueError, OSError) as exc:
        print(f"qrmsim {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
