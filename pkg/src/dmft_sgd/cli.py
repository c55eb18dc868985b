"""Configuration-driven command line: simulate, dmft, compare.

Experiments are TOML documents with sections [model], [sim], [dmft], [run],
an optional [sweep], and an optional [desk_scale] override block applied by
--desk-scale.  Unknown keys are errors; the fully-resolved configuration is
echoed next to the outputs so a run can be reproduced exactly.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

import argparse
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import fixedpoint, hidim, kernels, traces
from .errors import ConfigError, DmftSgdError, DivergenceError, KernelNotPSDError, NonConvergenceError
from .grid import TimeGrid
from .model import HuberLoss, InitLaw, ModelSpec, NoiseLaw, Ridge, SquaredLoss

_MODEL_KEYS = {
    "k": 1, "k_star": 1, "gamma": 1.0, "kappa_bar": 1.0, "eta_bar": 1.0,
    "loss": "squared", "huber_threshold": 1.0, "activation": "linear",
    "teacher": "identity", "noise_variance": 0.0, "ridge_lambda": 0.0,
    "driver": "poisson", "init_self": 1.0, "init_cross": 0.0, "init_star": 1.0,
}
_SIM_KEYS = {
    "n": 1000, "d": 1000, "alpha": 0.0, "kappa": 1, "trials": 1, "seed": 0,
    "data_dist": "gaussian", "gf_substeps": 4, "cdf_thresholds": [1.0],
}
_DMFT_KEYS = {
    "T": 1.0, "delta": 0.05, "mode": "analytic", "max_iters": 50, "tol": 0.0,
    "damping": 1.0, "mc_samples": 10000, "predict_samples": 10000, "seed": 0,
}
_RUN_KEYS = {
    "engines": ["sgd"], "output_dir": "out", "plot_data": True, "threads": 0,
}
_SWEEP_KEYS = {"parameter": "", "values": []}
_ENGINES = ("sgd", "sme", "gf", "onepass", "dmft")


def _merge_section(name, defaults, given):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    out = dict(defaults)
    out.update(given)
    return out


def load_config(path, desk_scale=False):
    """Parse, validate, and fully resolve an experiment configuration."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    return resolve_config(doc, desk_scale=desk_scale)


def resolve_config(doc, desk_scale=False):
    doc = dict(doc)
    if doc.get("version") != 1:
        raise ConfigError("config must declare version = 1")
    known = {"version", "model", "sim", "dmft", "run", "sweep", "desk_scale"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    override = doc.pop("desk_scale", {})
    if desk_scale:
        for section, vals in override.items():
            if section not in ("model", "sim", "dmft", "run"):
                raise ConfigError(f"desk_scale may only override core sections, got [{section}]")
            doc.setdefault(section, {})
            doc[section] = {**doc[section], **vals}

    cfg = {
        "version": 1,
        "model": _merge_section("model", _MODEL_KEYS, doc.get("model", {})),
        "sim": _merge_section("sim", _SIM_KEYS, doc.get("sim", {})),
        "dmft": _merge_section("dmft", _DMFT_KEYS, doc.get("dmft", {})),
        "run": _merge_section("run", _RUN_KEYS, doc.get("run", {})),
    }
    if "sweep" in doc:
        cfg["sweep"] = _merge_section("sweep", _SWEEP_KEYS, doc["sweep"])
        if cfg["sweep"]["parameter"] not in ("model.eta_bar", "gamma"):
            raise ConfigError("sweep.parameter must be 'model.eta_bar' or 'gamma'")
        if not cfg["sweep"]["values"]:
            raise ConfigError("sweep.values must be non-empty")
    _validate(cfg)
    return cfg


def _validate(cfg):
    m, s = cfg["model"], cfg["sim"]
    if m["loss"] not in ("squared", "huber"):
        raise ConfigError(f"unknown loss {m['loss']!r}")
    if m["activation"] not in ("linear", "tanh", "sin"):
        raise ConfigError(f"unknown activation {m['activation']!r}")
    if m["teacher"] not in ("identity", "linear_noisy", "tanh_noisy", "sin_noisy"):
        raise ConfigError(f"unknown teacher {m['teacher']!r}")
    if m["driver"] not in ("poisson", "gaussian"):
        raise ConfigError(f"unknown driver {m['driver']!r}")
    if s["trials"] < 1:
        raise ConfigError("sim.trials must be >= 1")
    if s["n"] < 1 or s["d"] < 1:
        raise ConfigError("sim.n and sim.d must be >= 1")
    if abs(m["gamma"] - s["n"] / s["d"]) > 1e-9 * max(1.0, m["gamma"]):
        raise ConfigError(
            f"model.gamma={m['gamma']} must equal sim.n/sim.d={s['n'] / s['d']}"
        )
    engines = cfg["run"]["engines"]
    bad = [e for e in engines if e not in _ENGINES]
    if bad:
        raise ConfigError(f"unknown engines {bad}; valid: {list(_ENGINES)}")
    if cfg["dmft"]["mode"] not in ("analytic", "monte_carlo", "hybrid"):
        raise ConfigError(f"unknown dmft.mode {cfg['dmft']['mode']!r}")


def build_spec(cfg) -> ModelSpec:
    m = cfg["model"]
    loss = HuberLoss(m["huber_threshold"]) if m["loss"] == "huber" else SquaredLoss()
    init = InitLaw.from_blocks(
        m["init_self"] * np.eye(m["k"]),
        m["init_cross"] * np.ones((m["k"], m["k_star"])),
        m["init_star"] * np.eye(m["k_star"]),
    )
    return ModelSpec(
        k=m["k"], k_star=m["k_star"], gamma=m["gamma"], kappa_bar=m["kappa_bar"],
        eta_schedule=m["eta_bar"], driver=m["driver"], loss=loss,
        activation=m["activation"], teacher=m["teacher"],
        regularizer=Ridge(m["ridge_lambda"]), init_law=init,
        noise_law=NoiseLaw(m["noise_variance"]),
    )


def build_grid(cfg) -> TimeGrid:
    return TimeGrid(T=cfg["dmft"]["T"], delta=cfg["dmft"]["delta"])


def build_sim_config(cfg, grid) -> hidim.SimConfig:
    s = cfg["sim"]
    return hidim.SimConfig(
        n=s["n"], d=s["d"], grid=grid, alpha=s["alpha"], kappa=s["kappa"],
        trials=s["trials"], seed=s["seed"], data_dist=s["data_dist"],
        gf_substeps=s["gf_substeps"], thresholds=tuple(s["cdf_thresholds"]),
        threads=cfg["run"]["threads"] or None,
    )


def build_solve_options(cfg) -> fixedpoint.SolveOptions:
    d = cfg["dmft"]
    return fixedpoint.SolveOptions(
        max_iters=d["max_iters"], tol=d["tol"] or None, damping=d["damping"],
        mc_samples=d["mc_samples"], mode=d["mode"], seed=d["seed"],
    )


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize config value {v!r}")


def write_config_echo(path, cfg):
    """Write the fully-resolved config; re-parsing it reproduces the run."""
    with open(path, "w") as fh:
        fh.write("version = 1\n")
        for section in ("model", "sim", "dmft", "run", "sweep"):
            if section not in cfg:
                continue
            fh.write(f"\n[{section}]\n")
            for key, val in cfg[section].items():
                fh.write(f"{key} = {_toml_value(val)}\n")


def _sweep_instances(cfg):
    """Yield (label, resolved config) pairs; one pair when there is no sweep."""
    if "sweep" not in cfg:
        yield "", cfg
        return
    param, values = cfg["sweep"]["parameter"], cfg["sweep"]["values"]
    for v in values:
        inst = {k: (dict(val) if isinstance(val, dict) else val) for k, val in cfg.items()}
        inst.pop("sweep")
        if param == "model.eta_bar":
            inst["model"]["eta_bar"] = v
        else:  # gamma: keep d, rescale n
            inst["model"]["gamma"] = v
            inst["sim"]["n"] = int(round(v * inst["sim"]["d"]))
        _validate(inst)
        yield f"_{param.split('.')[-1]}{v:g}", inst


def _run_engines(cfg, label, out_dir):
    spec = build_spec(cfg)
    grid = build_grid(cfg)
    sim = build_sim_config(cfg, grid)
    written = []
    for engine in cfg["run"]["engines"]:
        if engine == "dmft":
            written += _run_dmft(cfg, label, out_dir)
            continue
        trace = hidim.simulate(engine, sim, spec)
        path = os.path.join(out_dir, f"{engine}{label}.csv")
        traces.write_trace_csv(path, trace)
        written.append(path)
    return written


def _run_dmft(cfg, label, out_dir):
    spec = build_spec(cfg)
    grid = build_grid(cfg)
    options = build_solve_options(cfg)
    state, report = fixedpoint.solve(spec, grid, options)

    state_path = os.path.join(out_dir, f"dmft_state{label}.bin")
    kernels.save_state(state_path, state)
    report_path = os.path.join(out_dir, f"dmft_report{label}.csv")
    with open(report_path, "w") as fh:
        fh.write("iteration,distance,wall_time\n")
        for it, dist, wall in report.rows():
            fh.write(f"{it},{dist!r},{wall!r}\n")

    if not cfg["run"]["plot_data"]:
        return [state_path, report_path]
    pred = fixedpoint.predict_observables(
        state, spec, n_samples=cfg["dmft"]["predict_samples"], seed=cfg["dmft"]["seed"],
        thresholds=tuple(cfg["sim"]["cdf_thresholds"]),
    )
    p = len(pred.times)
    trace = traces.ObservableTrace(
        times=pred.times,
        overlap=pred.overlap, overlap_stderr=np.zeros_like(pred.overlap),
        self_overlap=pred.self_overlap, self_overlap_stderr=np.zeros_like(pred.self_overlap),
        train_loss=pred.train_loss, train_loss_stderr=pred.train_loss_stderr,
        xi_cdf=pred.xi_cdf, xi_cdf_stderr=pred.xi_cdf_stderr,
        thresholds=pred.thresholds, n_trials=cfg["dmft"]["predict_samples"],
        meta={"engine": "dmft", "seed": cfg["dmft"]["seed"], "mode": cfg["dmft"]["mode"],
              "converged": report.converged, "n": cfg["sim"]["n"], "d": cfg["sim"]["d"]},
    )
    pred_path = os.path.join(out_dir, f"dmft{label}.csv")
    traces.write_trace_csv(pred_path, trace)
    return [state_path, report_path, pred_path]


def cmd_simulate(args):
    cfg = load_config(args.config, desk_scale=args.desk_scale)
    out_dir = cfg["run"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_config_echo(os.path.join(out_dir, "resolved_config.toml"), cfg)
    written = []
    for label, inst in _sweep_instances(cfg):
        written += _run_engines(inst, label, out_dir)
    for path in written:
        print(path)
    return 0


def cmd_dmft(args):
    cfg = load_config(args.config, desk_scale=args.desk_scale)
    if "dmft" not in _raw_sections(args.config):
        raise ConfigError("config has no [dmft] section")
    out_dir = cfg["run"]["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    write_config_echo(os.path.join(out_dir, "resolved_config.toml"), cfg)
    written = []
    for label, inst in _sweep_instances(cfg):
        written += _run_dmft(inst, label, out_dir)
    for path in written:
        print(path)
    return 0


def _raw_sections(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def cmd_compare(args):
    if len(args.traces) < 2:
        raise ConfigError("compare needs at least two trace files")
    base = traces.read_trace_csv(args.traces[0])
    others = [traces.read_trace_csv(p) for p in args.traces[1:]]
    names = [os.path.splitext(os.path.basename(p))[0] for p in args.traces[1:]]
    rows, summary = traces.compare_traces(base, others, names=names)
    traces.write_compare_csv(args.output, rows, summary)
    print(args.output)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="dmft-sgd",
                                     description="simulators and DMFT solver for multi-pass SGD")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the configured engines")
    p_sim.add_argument("config")
    p_sim.add_argument("--desk-scale", action="store_true",
                       help="apply the [desk_scale] override block")
    p_sim.set_defaults(fn=cmd_simulate)

    p_dmft = sub.add_parser("dmft", help="solve the kernel fixed point and predict")
    p_dmft.add_argument("config")
    p_dmft.add_argument("--desk-scale", action="store_true")
    p_dmft.set_defaults(fn=cmd_dmft)

    p_cmp = sub.add_parser("compare", help="tabulate differences between traces")
    p_cmp.add_argument("traces", nargs="+")
    p_cmp.add_argument("--output", default="compare.csv")
    p_cmp.set_defaults(fn=cmd_compare)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, NonConvergenceError, KernelNotPSDError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DmftSgdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
