"""Command line: ``rhcbf collect | train | verify | sweep | plot | report``.

Exit codes: 0 ok, 1 usage or config error, 2 verification failed, 3 runtime error.
Artifacts live under the output directory::

    data/               dataset CSVs + manifest.json
    models/NAME.json    checkpoint, NAME_trace.csv
    verify/NAME.json    verification report
    sweep/grid.csv, sweep/aggregate.csv
    plots/*.svg
    report.json, report.md

Each artifact records the hash of the config sections it depends on; later
stages refuse artifacts with a different hash unless ``--force`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import ConfigError, ExperimentConfig, apply_overrides, dump_config, load_config, with_seed
from .datasets import load_bundle, save_bundle
from .net import BarrierNet, CheckpointError
from .plotting import bar_chart_svg, slice_contour, step_grid_svg

log = logging.getLogger("rhcbf")

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_RUNTIME = 0, 1, 2, 3


class HashMismatch(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def out_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output.directory)


def _check_hash(found, expected, what: str, force: bool) -> None:
    if found != expected:
        msg = f"{what} was produced by a different config (hash {found}, expected {expected})"
        if not force:
            raise HashMismatch(msg + "; rerun the stage or pass --force")
        log.warning("%s; continuing because of --force", msg)


def _write_config(cfg: ExperimentConfig, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, d / "config.toml")


def load_dataset(cfg: ExperimentConfig, force: bool = False):
    d = out_dir(cfg) / "data"
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"dataset not found at {d}; run 'rhcbf collect' first")
    man = json.loads((d / "manifest.json").read_text())
    _check_hash(man.get("config_hash"), cfg.stage_hash("collect"), f"dataset {d}", force)
    return ex.attach_sets(cfg, load_bundle(d))


def load_model(cfg: ExperimentConfig, name: str, force: bool = False) -> BarrierNet:
    p = out_dir(cfg) / "models" / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found; run 'rhcbf train' first")
    net = BarrierNet.load(p)
    _check_hash(net.metadata.get("config_hash"), cfg.stage_hash("train"), f"checkpoint {p}", force)
    return net


def _selected(cfg: ExperimentConfig, names):
    names = list(cfg.models) if not names else names
    unknown = set(names) - set(cfg.models)
    if unknown:
        raise ConfigError(f"unknown model(s) {sorted(unknown)}; configured: {sorted(cfg.models)}")
    return names


# --------------------------------------------------------------------------
# commands


def cmd_collect(cfg: ExperimentConfig, force: bool = False) -> Path:
    d = out_dir(cfg) / "data"
    bundle = ex.collect(cfg)
    save_bundle(bundle, d, extra_meta={"config_hash": cfg.stage_hash("collect")})
    _write_config(cfg, d)
    log.info("dataset: %d flow, %d jump, %d ring samples -> %s", bundle.n_flow, bundle.n_jump, bundle.n_ring, d)
    return d


def cmd_train(cfg: ExperimentConfig, names=None, force: bool = False) -> dict:
    bundle = load_dataset(cfg, force)
    d = out_dir(cfg) / "models"
    d.mkdir(parents=True, exist_ok=True)
    out = {}
    for name in _selected(cfg, names):
        delta = float(cfg.models[name])

        def cb(epoch, L, res, name=name):
            if epoch % 5000 == 0:
                log.info("%s epoch %d L=%.5f", name, epoch, L)

        net, trace = ex.train_model(cfg, bundle, delta, callback=cb)
        net.metadata.update({"config_hash": cfg.stage_hash("train"), "model": name})
        net.save(d / f"{name}.json")
        trace.to_csv(d / f"{name}_trace.csv")
        log.info("%s: best iterate has %s violated constraints", name, net.metadata.get("best_violations"))
        out[name] = net
    _write_config(cfg, d)
    return out


def cmd_verify(cfg: ExperimentConfig, names=None, force: bool = False) -> dict:
    bundle = load_dataset(cfg, force)
    d = out_dir(cfg) / "verify"
    d.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name in _selected(cfg, names):
        net = load_model(cfg, name, force)
        rep = ex.verify_model(cfg, bundle, net, float(cfg.models[name]))
        rep.provenance["config_hash"] = cfg.stage_hash("train")
        rep.save(d / f"{name}.json")
        log.info("%s\n%s", name, rep.summary())
        reports[name] = rep
    _write_config(cfg, d)
    return reports


def cmd_sweep(cfg: ExperimentConfig, force: bool = False) -> ex.SweepResult:
    nets = {k: load_model(cfg, k, force) for k in cfg.sweep.controllers if k in ("robust", "nonrobust")}
    res = ex.run_sweep(cfg, nets, progress=log.info)
    d = out_dir(cfg) / "sweep"
    d.mkdir(parents=True, exist_ok=True)
    h = cfg.stage_hash("sweep")
    ex.write_rows(d / "grid.csv", ex.GRID_HEADER, res.grid, h)
    ex.write_rows(d / "aggregate.csv", ex.AGG_HEADER, res.aggregate, h)
    _write_config(cfg, d)
    return res


def cmd_plot(cfg: ExperimentConfig, force: bool = False, resolution: float = 0.01) -> list:
    d = out_dir(cfg)
    grid_path = d / "sweep" / "grid.csv"
    if not grid_path.exists():
        raise FileNotFoundError(f"{grid_path} not found; run 'rhcbf sweep' first")
    header, rows, h = ex.read_rows(grid_path)
    if not rows:
        raise ValueError(f"{grid_path} has no rows")
    _check_hash(h, cfg.stage_hash("sweep"), str(grid_path), force)
    col = {k: i for i, k in enumerate(header)}
    hw = cfg.sweep.ic_halfwidth
    xlim, ylim = (-hw[0] * 1.1, hw[0] * 1.1), (-2.0 - hw[1] * 1.1, -2.0 + hw[1] * 1.1)
    panels, seen = {}, set()
    for r in rows:
        if int(r[col["seed"]]) != int(cfg.sweep.seeds[0]):
            continue
        key = (r[col["controller"]], f"dc={float(r[col['delta_c']]):g} mH={float(r[col['m_h']]):g}")
        seen.add(key)
        panels.setdefault(key, ([], [], []))
        panels[key][0].append(float(r[col["theta_swing"]]))
        panels[key][1].append(float(r[col["dtheta_swing"]]))
        panels[key][2].append(float(r[col["steps"]]))
    contours = {}
    for name in ("robust", "nonrobust"):
        if name in cfg.models and (d / "models" / f"{name}.json").exists():
            net = load_model(cfg, name, force)
            contours[name] = slice_contour(net, xlim, ylim, resolution)
    pd = d / "plots"
    pd.mkdir(parents=True, exist_ok=True)
    step_grid_svg({k: tuple(np.array(v) for v in vals) for k, vals in panels.items()}, pd / "steps.svg",
                  cfg.sweep.max_steps, xlim, ylim, contours)
    _, agg, _ = ex.read_rows(d / "sweep" / "aggregate.csv")
    bars: dict = {}
    for r in agg:
        bars.setdefault(f"dc={float(r[1]):g} mH={float(r[2]):g}", {})[r[0]] = float(r[3])
    bar_chart_svg(bars, pd / "mean_steps.svg")
    return [pd / "steps.svg", pd / "mean_steps.svg"]


def cmd_report(cfg: ExperimentConfig, force: bool = False) -> dict:
    d = out_dir(cfg)
    rep = {"name": cfg.name, "config_hash": cfg.hash(), "filter": "min-norm projection of the energy expert",
           "models": {}, "verification": {}, "mean_steps": []}
    for name in cfg.models:
        p = d / "models" / f"{name}.json"
        if p.exists():
            rep["models"][name] = load_model(cfg, name, force).metadata
        v = d / "verify" / f"{name}.json"
        if v.exists():
            rep["verification"][name] = json.loads(v.read_text()).get("passed")
    agg_path = d / "sweep" / "aggregate.csv"
    if agg_path.exists():
        _, agg, h = ex.read_rows(agg_path)
        _check_hash(h, cfg.stage_hash("sweep"), str(agg_path), force)
        rep["mean_steps"] = [{"controller": r[0], "delta_c": float(r[1]), "m_h": float(r[2]),
                              "mean_steps": float(r[3]), "seed_std": float(r[4])} for r in agg]
    (d / "report.json").write_text(json.dumps(rep, indent=1, sort_keys=True))
    lines = [f"# {cfg.name}", "", f"config hash `{rep['config_hash']}`", ""]
    if rep["mean_steps"]:
        lines += ["| controller | delta_c | m_H | mean steps | seed std |", "|---|---|---|---|---|"]
        lines += [f"| {m['controller']} | {m['delta_c']:g} | {m['m_h']:g} | {m['mean_steps']:.3f} | {m['seed_std']:.3f} |"
                  for m in rep["mean_steps"]]
    for name, ok in rep["verification"].items():
        lines.append(f"- verification of {name}: {'passed' if ok else 'FAILED'}")
    (d / "report.md").write_text("\n".join(lines) + "\n")
    return rep


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="data and training seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="accept artifacts from a different config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="rhcbf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("collect", parents=[common], help="simulate the expert and write the dataset")
    for name in ("train", "verify"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} the configured barrier models")
        sp.add_argument("--model", action="append", help="restrict to this model (repeatable)")
    sub.add_parser("sweep", parents=[common], help="step-count sweeps over the configured controllers")
    sp = sub.add_parser("plot", parents=[common], help="SVG step grids and level sets")
    sp.add_argument("--resolution", type=float, default=0.01, help="contour grid spacing")
    sub.add_parser("report", parents=[common], help="summarize results into report.json / report.md")
    return p


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    cfg = apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.out is not None:
        cfg = apply_overrides(cfg, [f"output.directory={args.out}"])
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "collect":
            cmd_collect(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.model, args.force)
        elif args.command == "verify":
            reports = cmd_verify(cfg, args.model, args.force)
            if not all(r.passed for r in reports.values()):
                return EXIT_VERIFY
        elif args.command == "sweep":
            cmd_sweep(cfg, args.force)
        elif args.command == "plot":
            cmd_plot(cfg, args.force, args.resolution)
        elif args.command == "report":
            cmd_report(cfg, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (HashMismatch, FileNotFoundError, CheckpointError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
