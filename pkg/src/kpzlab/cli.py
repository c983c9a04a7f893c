"""``kpzlab`` command line: oracle checks, ensembles, W1 experiments, reports.

Exit codes: 0 every check passed, 1 some check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import ensemble as es
from . import field as kf
from . import oracle, wasserstein
from .config import KINDS, ConfigError, ExperimentConfig
from .gaussian_env import manifest_hash

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
CSV_COLUMNS = ("quantity", "x_or_y", "value", "std_error", "n", "manifest_hash")
PLOT_COLUMNS = ("quantity", "x", "value", "se", "manifest_hash")
CORRUPTION = 1e-3
STATIONARITY_ENFORCED_DX = 0.05


# --- output helpers ----------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if math.isfinite(v) else ""
    return str(v)


def write_csv(path: Path, rows: list[tuple], columns=CSV_COLUMNS) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _est_row(quantity: str, x, est: es.EstimateWithError, mh: str) -> tuple:
    return (quantity, x, est.value, est.std_error if est.has_error else None, est.n, mh)


class Run:
    """Output directory for one experiment, stamped with its manifest."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.manifest = cfg.manifest()
        self.hash = manifest_hash(self.manifest)
        self.dir = out
        self.dir.mkdir(parents=True, exist_ok=True)
        cfg_dict = cfg.to_dict()
        cfg_dict.pop("workers")  # parallelism never changes results
        write_json(self.dir / "manifest.json",
                   {"manifest": self.manifest, "manifest_hash": self.hash, "config": cfg_dict})

    def csv(self, name: str, rows: list[tuple]) -> None:
        write_csv(self.dir / f"{name}.csv", rows)

    def summary(self, name: str, obj: dict) -> None:
        write_json(self.dir / f"{name}.summary.json", {**obj, "manifest_hash": self.hash})


def _line(ok: bool | None, label: str, detail: str = "") -> None:
    tag = "INFO" if ok is None else ("PASS" if ok else "FAIL")
    print(f"{tag:4s}  {label}" + (f"  {detail}" if detail else ""))


# --- subcommands -------------------------------------------------------------

def cmd_verify_tiny(cfg: ExperimentConfig, out: Path, corrupt_derivative: bool = False) -> int:
    run = Run(cfg, out)
    corrupt = CORRUPTION if corrupt_derivative else 0.0
    t0 = time.perf_counter()
    res = oracle.run_all(tuple(cfg.orders), tuple(cfg.schemes), corrupt=corrupt, sigma=cfg.sigma,
                         derivative_points=cfg.derivative_points)
    elapsed = time.perf_counter() - t0
    rows = []
    checks = []
    for c in res["checks"]:
        c = {k: v for k, v in c.items() if k != "wall_time"}
        checks.append(c)
        rows.append((f"{c['check']}:{c['scheme']}", c["order"], c["residual"], None, c["nodes"], run.hash))
        if c["pass"] is not None:
            _line(c["pass"], f"{c['check']} [{c['scheme']}]",
                  f"residual={c['residual']:.3e}" + (f" order={c['order']}" if c["order"] else ""))
    run.csv("verify_tiny", rows)
    run.summary("verify_tiny", {"kind": "verify-tiny", "checks": checks, "tolerance": res["tolerance"],
                                "pass": res["pass"]})
    print(f"verify-tiny finished in {elapsed:.1f}s -> {run.dir}", file=sys.stderr)
    return EXIT_PASS if res["pass"] else EXIT_FAIL


def ensemble_report(acc: es.EnsembleAccumulator, cfg: ExperimentConfig, mh: str) -> tuple[dict, dict]:
    """All ensemble estimates: ``({csv name: rows}, summary)``."""
    grid = acc.grid
    L = grid.half_width
    tables = {"g": [], "cdf": [], "residuals": []}
    for y in grid.sites:
        y = int(y)
        tables["g"].append(_est_row("g", y, es.variance_function(acc, y), mh))
        tables["cdf"].append(_est_row("cdf", y, es.endpoint_cdf(acc, y), mh))
    res = tables["residuals"]
    identities = {}

    slope_cdf = [es.slope_cdf_residual(acc, y) for y in cfg.probes]
    ok1 = [e.within() for e in slope_cdf]
    for y, e in zip(cfg.probes, slope_cdf):
        res.append(_est_row("slope_cdf_residual", y, e, mh))
    need = len(ok1) - len(ok1) // 11
    identities["slope_cdf"] = {"passing": sum(ok1), "total": len(ok1), "required": need,
                           "pass": sum(ok1) >= need}

    sym = [es.cdf_symmetry_residual(acc, y) for y in cfg.probes]
    for y, e in zip(cfg.probes, sym):
        res.append(_est_row("cdf_symmetry_residual", y, e, mh))
    identities["cdf_symmetry"] = {"passing": sum(e.within() for e in sym), "total": len(sym),
                                  "pass": all(e.within() for e in sym)}

    k_half, k_one = round(0.5 / grid.dx), round(1.0 / grid.dx)
    decomp_x = [x for x in (-k_one, -k_half, k_half, k_one) if 0 < abs(x) <= L]
    decomp = [es.g_function_decomposition(acc, x) for x in decomp_x]
    for x, e in zip(decomp_x, decomp):
        res.append(_est_row("variance_decomposition_residual", x, e, mh))
    identities["variance_decomposition"] = {"sites": decomp_x, "pass": all(e.within() for e in decomp)}

    try:
        phi1, phi2 = kf.from_spec(grid, cfg.phi1), kf.from_spec(grid, cfg.phi2)
        lhs, rhs, diff = es.two_point(acc, phi1, phi2)
        res.extend([_est_row("two_point_lhs", None, lhs, mh), _est_row("two_point_rhs", None, rhs, mh),
                    _est_row("two_point_difference", None, diff, mh)])
        identities["two_point"] = {"lhs": lhs.value, "rhs": rhs.value, "difference": diff.to_dict(),
                               "pass": diff.within()}
    except kf.MarginError as e:
        identities["two_point"] = {"skipped": str(e), "pass": None}

    if acc.sigma == 1.0 and grid.n_steps > 0 and k_half <= L:
        st = es.stationary_checks(acc)
        for x, e in st["increment_variance_ratio"].items():
            res.append(_est_row("increment_variance_ratio", x, e, mh))
        res.append(_est_row("mean_abs_endpoint", None, st["mean_abs_endpoint"], mh))
        res.append(_est_row("stationarity_relative_gap", None, st["relative_gap"], mh))
        ratios_ok = all(0.9 <= e.value <= 1.1 for e in st["increment_variance_ratio"].values())
        gap_ok = abs(st["relative_gap"].value) <= 0.1
        enforced = grid.dx <= STATIONARITY_ENFORCED_DX + 1e-12
        identities["stationarity"] = {
            "increment_variance_ratio": {str(k): v.value for k, v in st["increment_variance_ratio"].items()},
            "relative_gap": st["relative_gap"].value, "ratios_ok": ratios_ok, "gap_ok": gap_ok,
            "enforced": enforced, "pass": bool(ratios_ok and gap_ok) if enforced else None,
            "diagnostic": None if (ratios_ok and gap_ok) else
            f"continuum checks off at dx={grid.dx}; rerun with dx={grid.dx / 2} (dt/4) to see the trend",
        }

    enforced = [v["pass"] for v in identities.values() if v["pass"] is not None]
    summary = {"kind": "ensemble", "n_replicas": acc.n_replicas, "t": grid.t,
               "mass_loss": acc.mass_loss(), "mass_loss_flagged": acc.flagged(),
               "identities": identities, "pass": all(enforced)}
    return tables, summary


def cmd_ensemble(cfg: ExperimentConfig, out: Path) -> int:
    run = Run(cfg, out)
    config = es.EnsembleConfig(cfg.grid(), cfg.sigma, cfg.seed, cfg.scheme)
    acc = es.run_ensemble(config, cfg.replicas, workers=cfg.workers)
    tables, summary = ensemble_report(acc, cfg, run.hash)
    for name, rows in tables.items():
        run.csv(name, rows)
    run.summary("ensemble", summary)
    for name, ident in summary["identities"].items():
        detail = ", ".join(f"{k}={v}" for k, v in ident.items() if k in ("passing", "total", "relative_gap"))
        _line(ident["pass"], name, detail)
        if ident.get("diagnostic"):
            print(f"      {ident['diagnostic']}")
    return EXIT_PASS if summary["pass"] else EXIT_FAIL


def cmd_wasserstein(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.replicas > wasserstein.MAX_POINTS:
        raise ConfigError("replicas", f"exact W1 is limited to {wasserstein.MAX_POINTS} pairs")
    run = Run(cfg, out)
    rows, reports = [], []
    for t in cfg.grid_times():
        grid = cfg.grid(t)
        acc = es.run_ensemble(es.EnsembleConfig(grid, cfg.sigma, cfg.seed, cfg.scheme), cfg.replicas,
                              workers=cfg.workers)
        phi1, phi2 = kf.from_spec(grid, cfg.phi1), kf.from_spec(grid, cfg.phi2)
        rep = wasserstein.check_bound(acc, phi1, phi2, n_permutations=cfg.permutations)
        reports.append(rep)
        run.summary(f"wasserstein_t{t:g}", {"kind": "wasserstein", **rep})
        for q in ("w1", "rhs", "bias_allowance", "slack"):
            se = rep.get(f"{q}_se")
            rows.append((q, t, rep[q], se, rep["n"], run.hash))
        _line(rep["pass"], f"wasserstein t={t:g}",
              f"w1={rep['w1']:.4f}+-{rep['w1_se']:.4f} rhs={rep['rhs']:.4f} bias={rep['bias_allowance']:.4f}")
    run.csv("wasserstein", rows)
    ok = all(r["pass"] for r in reports)
    run.summary("wasserstein", {"kind": "wasserstein", "times": cfg.grid_times(), "pass": ok})
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_flat_limit(cfg: ExperimentConfig, out: Path) -> int:
    run = Run(cfg, out)
    grid = cfg.grid()

    def sim(sigma):
        return es.run_ensemble(es.EnsembleConfig(grid, sigma, cfg.seed, cfg.scheme), cfg.replicas,
                               workers=cfg.workers)

    flat = sim(0.0)
    runs = {float(s): sim(float(s)) for s in cfg.sigmas}
    res = es.flat_limit_check(runs, flat, tuple(cfg.probes), cfg.smoothing_halfwidth, cfg.tolerance)
    rows = []
    for r in res["rows"]:
        rows.append(("sup_norm", r["sigma"], r["sup_norm"], r["sup_norm_se"], flat.n_replicas, run.hash))
    for r in res["rows"]:
        for p in r["probes"]:
            d = p["difference"]
            rows.append((f"density_difference:sigma={r['sigma']:g}", p["y"], d["value"], d["std_error"],
                         d["n"], run.hash))
    for p in res["rows"][-1]["probes"] if res["rows"] else []:
        d = p["direct_density"]
        rows.append(("flat_density", p["y"], d["value"], d["std_error"], d["n"], run.hash))
    run.csv("flat_limit", rows)
    run.summary("flat_limit", {"kind": "flat-limit", **res})
    for r in res["rows"]:
        _line(None, f"sigma={r['sigma']:g}", f"sup_norm={r['sup_norm']:.4f}+-{r['sup_norm_se']:.4f}")
    _line(res["monotone_within_se"], "sup-norm nonincreasing in sigma (within 3 SE)")
    _line(res["final_within_tolerance"], f"smallest sigma within {cfg.tolerance}")
    return EXIT_PASS if res["pass"] else EXIT_FAIL


def cmd_report(run_dir: Path) -> int:
    if not run_dir.is_dir():
        print(f"error: {run_dir} is not a directory", file=sys.stderr)
        return EXIT_USAGE
    manifests = sorted(run_dir.rglob("manifest.json"))
    if not manifests:
        print(f"error: no manifest.json under {run_dir}", file=sys.stderr)
        return EXIT_USAGE
    runs = {}
    for mpath in manifests:
        m = json.loads(mpath.read_text(encoding="utf-8"))
        h = m["manifest_hash"]
        d = mpath.parent
        summaries = {}
        for s in sorted(d.glob("*.summary.json")):
            obj = json.loads(s.read_text(encoding="utf-8"))
            if obj.get("manifest_hash") != h:
                print(f"error: {s} has manifest hash {obj.get('manifest_hash')}, "
                      f"directory manifest is {h}; refusing to merge", file=sys.stderr)
                return EXIT_USAGE
            summaries[s.name[:-len(".summary.json")]] = obj
        plot_rows = []
        for c in sorted(d.glob("*.csv")):
            if c.name == "plot_data.csv":
                continue
            with c.open(encoding="utf-8", newline="") as f:
                for r in csv.DictReader(f):
                    if r.get("manifest_hash") != h:
                        print(f"error: {c} mixes manifest hashes; refusing to merge", file=sys.stderr)
                        return EXIT_USAGE
                    plot_rows.append((r["quantity"], r["x_or_y"], r["value"], r["std_error"], h))
        if h in runs:
            runs[h]["dirs"].append(str(d.relative_to(run_dir)))
            continue
        runs[h] = {"kind": m["manifest"].get("kind"), "manifest": m["manifest"],
                   "dirs": [str(d.relative_to(run_dir))], "summaries": summaries, "plot_rows": plot_rows}

    lines, index, plot = [], {}, []
    for h in sorted(runs):
        r = runs[h]
        lines.append(f"== run {h}  kind={r['kind']}  dir={', '.join(r['dirs'])}")
        flags = {}
        for name, s in sorted(r["summaries"].items()):
            for ident, v in _identity_flags(s).items():
                flags[f"{name}:{ident}" if ident else name] = v
        for k, v in flags.items():
            tag = "n/a " if v is None else ("PASS" if v else "FAIL")
            lines.append(f"   {tag}  {k}")
        index[h] = {"kind": r["kind"], "dirs": r["dirs"], "manifest": r["manifest"], "pass": flags}
        plot.extend(r["plot_rows"])
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_json(run_dir / "index.json", index)
    write_csv(run_dir / "plot_data.csv", plot, PLOT_COLUMNS)
    print("\n".join(lines))
    return EXIT_PASS


def _identity_flags(summary: dict) -> dict:
    if "identities" in summary:
        return {k: v.get("pass") for k, v in summary["identities"].items()}
    if "checks" in summary:
        out = {}
        for c in summary["checks"]:
            if c.get("pass") is not None:
                out[f"{c['check']}[{c['scheme']}]"] = c["pass"]
        return out
    return {"": summary.get("pass")}


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kpzlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--replicas", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", type=Path, help="output directory (default runs/<kind>-<hash>)")
        if kind == "verify-tiny":
            sp.add_argument("--corrupt-derivative", action="store_true", help=argparse.SUPPRESS)
    rp = sub.add_parser("report")
    rp.add_argument("run_dir", type=Path)
    return p


def load_config(kind: str, args: argparse.Namespace) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError("<file>", f"cannot read {args.config}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON at line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError("<root>", "expected a JSON object")
    if data.setdefault("kind", kind) != kind:
        raise ConfigError("kind", f"config is for {data['kind']!r}, command is {kind!r}")
    for name in ("seed", "replicas", "workers"):
        v = getattr(args, name)
        if v is not None:
            data[name] = v
    return ExperimentConfig.from_dict(data)


COMMANDS = {"verify-tiny": cmd_verify_tiny, "ensemble": cmd_ensemble,
            "wasserstein": cmd_wasserstein, "flat-limit": cmd_flat_limit}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_PASS
    if args.command == "report":
        return cmd_report(args.run_dir)
    try:
        cfg = load_config(args.command, args)
        out = args.out or Path("runs") / f"{args.command}-{manifest_hash(cfg.manifest())}"
        if args.command == "verify-tiny":
            return cmd_verify_tiny(cfg, out, args.corrupt_derivative)
        return COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
