"""Batch front end: config parsing, pipeline subcommands, plot emission.

One declarative INI config per run, overridable by flags; every run writes a
manifest (config hash, package version, emitted files) into the output
directory.  Exit codes: 0 success, 2 config error, 3 numerical failure,
4 acceptance-threshold failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import sys
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import __version__
from .field import Grid
from .geometry import MetricSpec

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_THRESHOLD = 4

_SCHEMA = {
    "metric": {
        "x0": float,
        "link": str,
        "pert_amplitude": float,
        "pert_mode_1": int,
        "pert_mode_2": int,
        "p_exponent": float,
    },
    "grid": {
        "nx": int,
        "n1": int,
        "n2": int,
        "x_lo_frac": float,
        "x_hi_frac": float,
    },
    "params": {
        "F": float,
        "h": float,
        "rank": int,
        "seed": int,
        "m0": str,  # "auto" or a float literal
    },
    "reconstruct": {
        "tol": float,
        "max_iter": int,
    },
    "symbols": {
        "n_per_axis": int,
        "n_infinity": int,
        "f_sweep": str,  # comma-separated floats
    },
    "output": {
        "dir": str,
    },
}

_DEFAULTS = {
    "metric": {"x0": 0.3, "link": "torus", "pert_amplitude": 0.0,
               "pert_mode_1": 1, "pert_mode_2": 0, "p_exponent": 1.0},
    "grid": {"nx": 16, "n1": 12, "n2": 12, "x_lo_frac": 0.08, "x_hi_frac": 0.93},
    "params": {"F": 1.0, "h": 0.1, "rank": 1, "seed": 1234, "m0": "auto"},
    "reconstruct": {"tol": 1e-8, "max_iter": 300},
    "symbols": {"n_per_axis": 17, "n_infinity": 64,
                "f_sweep": "0.1,0.5,1,2,5,20"},
    "output": {"dir": "runs/out"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run configuration; round-trips through the INI format."""

    values: dict = dc_field(default_factory=dict)

    @classmethod
    def defaults(cls):
        return cls({s: dict(v) for s, v in _DEFAULTS.items()})

    @classmethod
    def from_ini(cls, path_or_text):
        cp = configparser.ConfigParser()
        try:
            if isinstance(path_or_text, (str, Path)) and Path(path_or_text).exists():
                cp.read(path_or_text)
            else:
                cp.read_string(str(path_or_text))
        except configparser.Error as exc:
            raise ConfigError(f"config parse error: {exc}") from exc
        cfg = cls.defaults()
        for section in cp.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                typ = _SCHEMA[section][key]
                try:
                    cfg.values[section][key] = typ(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for [{section}] {key}: {raw!r}"
                    ) from exc
        cfg.validate()
        return cfg

    def validate(self):
        v = self.values
        if not (0 < v["metric"]["x0"] < 1):
            raise ConfigError("metric.x0 must lie in (0, 1)")
        if v["metric"]["link"] not in ("torus", "sphere"):
            raise ConfigError("metric.link must be torus or sphere")
        if v["params"]["rank"] not in (0, 1, 2):
            raise ConfigError("params.rank must be 0, 1 or 2")
        if v["params"]["m0"] != "auto":
            try:
                float(v["params"]["m0"])
            except ValueError:
                raise ConfigError("params.m0 must be 'auto' or a number")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, items in self.values.items():
            cp[section] = {k: repr(val) if isinstance(val, float) else str(val)
                           for k, val in items.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def hash(self) -> str:
        norm = json.dumps(self.values, sort_keys=True, default=str)
        return hashlib.sha256(norm.encode()).hexdigest()[:16]

    # -- object construction ---------------------------------------------------

    def metric_spec(self) -> MetricSpec:
        m = self.values["metric"]
        return MetricSpec(
            x0=m["x0"], link=m["link"], pert_amplitude=m["pert_amplitude"],
            pert_mode=(m["pert_mode_1"], m["pert_mode_2"]),
            p_exponent=m["p_exponent"],
        )

    def grid(self, spec=None) -> Grid:
        spec = spec or self.metric_spec()
        g = self.values["grid"]
        return Grid(spec, g["nx"], g["n1"], g["n2"],
                    x_lo=g["x_lo_frac"] * spec.x0,
                    x_hi=g["x_hi_frac"] * spec.x0)

    def m0(self):
        raw = self.values["params"]["m0"]
        return None if raw == "auto" else float(raw)


class Manifest:
    def __init__(self, outdir: Path, config: RunConfig, command: str):
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.entries = []
        self.meta = {
            "command": command,
            "config_hash": config.hash(),
            "version": __version__,
            "numpy": np.__version__,
        }

    def add(self, path: Path):
        self.entries.append(str(Path(path).name))
        return Path(path)

    def write(self):
        data = dict(self.meta, outputs=sorted(self.entries))
        with open(self.outdir / "manifest.json", "w") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.17g}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


# -- subcommands -----------------------------------------------------------------


def cmd_geodesics(cfg: RunConfig, man: Manifest) -> int:
    from .geodesic import conic_closed_form, shoot

    spec = cfg.metric_spec()
    seed = cfg.values["params"]["seed"]
    rng = np.random.default_rng(seed)
    link = spec.link_metric
    rows = []
    worst = 0.0
    for k in range(20):
        r0 = rng.uniform(0.4, np.pi - 0.4)
        y0 = rng.uniform(0, 2 * np.pi, 2)
        ang = rng.uniform(0, 2 * np.pi)
        mu_hat = np.array([np.cos(ang), np.sin(ang)])
        x_start = rng.uniform(0.2, 0.5) * spec.x0
        st = conic_closed_form(x_start, r0, y0, mu_hat, link, 0.0)
        path = shoot(spec, st, tol=1e-11)
        ts = np.linspace(path.ts[0] * 0.98, path.ts[-1] * 0.98, 40)
        raw = path.state_at(ts)
        err = 0.0
        for rr, xx in zip(raw[6], raw[0]):
            if -r0 + 0.05 < rr < -r0 + np.pi - 0.05:
                cf = conic_closed_form(x_start, r0, y0, mu_hat, link, rr)
                err = max(err, abs(cf.x - xx))
        rows.append((k, x_start, r0, err, path.energy_drift))
        worst = max(worst, err)
    out = man.add(man.outdir / "geodesic_comparison.csv")
    _write_csv(out, "index,x_start,r0,max_x_error,energy_drift", rows)
    path0 = shoot(spec, conic_closed_form(0.4 * spec.x0, 1.0, [1.0, 2.0],
                                          [1.0, 0.0], link, 0.0), tol=1e-11)
    dump = man.add(man.outdir / "geodesic_path.csv")
    path0.to_csv(dump)
    print(f"geodesics: max closed-form error {worst:.3e}")
    if spec.pert_amplitude == 0.0 and worst > 1e-6:
        return EXIT_THRESHOLD
    return EXIT_OK


def cmd_transform(cfg: RunConfig, man: Manifest) -> int:
    from .gauge import GaugeOperators
    from .recon import random_gauged_field
    from .xray import build_fan, transform_one

    spec = cfg.metric_spec()
    p = cfg.values["params"]
    rank = max(p["rank"], 1)
    grid = cfg.grid(spec)
    gauge = GaugeOperators(grid, F=p["F"], h=p["h"], rank=rank)
    f = random_gauged_field(grid, gauge, rank, p["F"], p["h"], p["seed"])
    fan = build_fan(spec, [0.5 * (grid.x_lo + grid.x_hi), 1.0, 2.0],
                    p["F"], p["h"], n_lambda=8, n_omega=8)
    rows = []
    for k, path in enumerate(fan.paths(tol=1e-9)):
        val = transform_one(f, path)
        rows.append((k, fan.lams[k], fan.omegas[k][0], fan.omegas[k][1], val))
    out = man.add(man.outdir / "transform_values.csv")
    _write_csv(out, "direction,lam,omega1,omega2,value", rows)
    print(f"transform: {len(rows)} geodesics through the fan base point")
    return EXIT_OK


def cmd_symbols(cfg: RunConfig, man: Manifest) -> int:
    from .symbolics import SampleSpec, ellipticity_margin, sigma_laplacian, FiberPoint

    spec = cfg.metric_spec()
    p = cfg.values["params"]
    s = cfg.values["symbols"]
    rank = p["rank"]
    samp = SampleSpec(spec=spec, h=p["h"], n_per_axis=s["n_per_axis"],
                      n_infinity=s["n_infinity"])
    # scalar symbol table (includes the reference value 14 at (1,(2,0),F=3))
    table = []
    for xi, eta1, eta2, F in [(1.0, 2.0, 0.0, 3.0), (0.0, 0.0, 0.0, p["F"]),
                              (1.0, 1.0, 1.0, p["F"])]:
        pt = FiberPoint(spec, 0.12 * spec.x0, np.array([1.0, 2.0]),
                        xi, np.array([eta1, eta2]), F, p["h"])
        table.append((xi, eta1, eta2, F,
                      float(np.real(sigma_laplacian(pt, 0).mat[0, 0]))))
    out = man.add(man.outdir / "laplacian_symbol_table.csv")
    _write_csv(out, "xi,eta1,eta2,F,symbol", table)
    if rank in (1, 2):
        rep = ellipticity_margin(rank, p["F"], samp)
        mpath = man.add(man.outdir / f"margins_rank{rank}.csv")
        rep.to_csv(mpath)
        sweep_rows = []
        if rank == 2:
            for Fv in [float(t) for t in s["f_sweep"].split(",")]:
                r = ellipticity_margin(2, Fv, samp)
                sweep_rows.append((Fv, r.kernel_margin, r.kernel_margin_raw))
            spath = man.add(man.outdir / "margin_sweep_rank2.csv")
            _write_csv(spath, "F,margin_rel,margin_raw", sweep_rows)
        print(f"symbols: rank-{rank} kernel margin {rep.kernel_margin:.3e}")
        if rep.kernel_margin <= 0:
            return EXIT_THRESHOLD
    return EXIT_OK


def cmd_gauge(cfg: RunConfig, man: Manifest) -> int:
    from .gauge import GaugeOperators

    spec = cfg.metric_spec()
    p = cfg.values["params"]
    rank = max(p["rank"], 1)
    grid = cfg.grid(spec)
    gauge = GaugeOperators(grid, F=p["F"], h=p["h"], rank=rank)
    rng = np.random.default_rng(p["seed"])
    from .field import TensorField

    f = TensorField.zeros(grid, rank, F=p["F"], h=p["h"], state="weighted")
    f.components[:] = rng.standard_normal(f.components.shape)
    S, P, Q, info = gauge.project_solenoidal(f, tol=cfg.values["reconstruct"]["tol"])
    viol = gauge.ddiv(S).norm() / f.norm()
    out = man.add(man.outdir / "gauge_solver.csv")
    info.to_csv(out)
    print(f"gauge: projection divergence {viol:.3e} in {info.iterations} iterations "
          f"({info.wall_time:.2f}s)")
    if not info.converged:
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, man: Manifest) -> int:
    from .recon import sinjectivity_experiment

    spec = cfg.metric_spec()
    p = cfg.values["params"]
    g = cfg.values["grid"]
    r = cfg.values["reconstruct"]
    rank = p["rank"] if p["rank"] in (1, 2) else 1
    rep = sinjectivity_experiment(
        spec, rank, p["F"], p["h"], seed=p["seed"],
        grid_shape=(g["nx"], g["n1"], g["n2"]),
        tol=r["tol"], max_iter=r["max_iter"], m0=cfg.m0(),
    )
    out = man.add(man.outdir / "recon_report.txt")
    rep.to_text(out)
    rcsv = man.add(man.outdir / "recon_residuals.csv")
    rep.residuals_csv(rcsv)
    print(rep.to_text())
    if not np.isfinite(rep.recovery_error):
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_plot(cfg: RunConfig, man: Manifest) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    outdir = man.outdir
    made = 0
    for csv_name, xcol, ycol, logy in [
        ("recon_residuals.csv", 0, 1, True),
        ("gauge_solver.csv", 0, 1, True),
        ("margin_sweep_rank2.csv", 0, 1, False),
        ("geodesic_comparison.csv", 0, 3, True),
    ]:
        src = outdir / csv_name
        if not src.exists():
            continue
        data = np.genfromtxt(src, delimiter=",", names=True)
        if data.size == 0:
            continue
        names = data.dtype.names
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(data[names[xcol]], data[names[ycol]], "o-", ms=3)
        if logy:
            ax.set_yscale("log")
        ax.set_xlabel(names[xcol])
        ax.set_ylabel(names[ycol])
        fig.tight_layout()
        dest = man.add(outdir / (src.stem + ".svg"))
        fig.savefig(dest)
        plt.close(fig)
        made += 1
    print(f"plot: wrote {made} figures")
    if made == 0:
        print("plot: no prior artifacts found", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


COMMANDS = {
    "geodesics": cmd_geodesics,
    "transform": cmd_transform,
    "symbols": cmd_symbols,
    "gauge": cmd_gauge,
    "reconstruct": cmd_reconstruct,
    "plot": cmd_plot,
}


def run(command: str, config: RunConfig, outdir=None):
    """Programmatic entry: run one subcommand, write artifacts + manifest."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    out = Path(outdir or config.values["output"]["dir"])
    man = Manifest(out, config, command)
    code = COMMANDS[command](config, man)
    man.write()
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="conetomo",
        description="Geodesic X-ray tomography on asymptotically conic collars",
    )
    ap.add_argument("command", nargs="?", choices=sorted(COMMANDS),
                    help="pipeline stage to run")
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("--rank", type=int, help="tensor rank override")
    ap.add_argument("--F", type=float, help="weight strength override")
    ap.add_argument("--h", type=float, dest="h", help="semiclassical parameter override")
    ap.add_argument("--seed", type=int, help="seed override")
    args = ap.parse_args(argv)

    if args.command is None:
        ap.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = RunConfig.from_ini(args.config) if args.config else RunConfig.defaults()
        for key in ("rank", "F", "h", "seed"):
            val = getattr(args, key, None)
            if val is not None:
                cfg.values["params"][key if key != "h" else "h"] = val
        cfg.validate()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(args.command, cfg, outdir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
