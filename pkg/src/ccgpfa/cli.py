"""Command-line front end: ``ccgpfa simulate|fit|evaluate|export --config FILE``.

The configuration is a TOML file with the tables ``[data]``, ``[model]``,
``[fit]``, ``[simulate]``, ``[evaluate]`` and ``[output]`` plus an optional
top-level ``seed``. Unknown keys are rejected before any computation.
Exit codes: 0 success, 1 usage/configuration/data error, 2 numerical failure.
"""

import argparse
import hashlib
import json
import os
import platform
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import scipy

from ccgpfa import __version__
from ccgpfa.container import ContainerError, read_container, write_container
from ccgpfa.data import (DataFormatError, DataValidationError, SpikeData, load_spikes, save_spikes,
                         simulate, split_trials)
from ccgpfa.evaluate import evaluate, export_tables
from ccgpfa.gp import ConditioningError
from ccgpfa.inference import FitError, FitOptions, fit
from ccgpfa.model import InitError, ModelConfig, load_state, save_state
from ccgpfa.specfun import DomainError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2

SCHEMA = {
    "seed": int,
    "data": {"path": str, "format": str, "bin_width_ms": float, "n_neurons": int, "n_bins": int,
             "n_trials": int, "holdout_fraction": float},
    "model": {"n_latents": int, "observation": str, "lengthscales": (list, float), "jitter": float,
              "ard_shape": float, "ard_rate": float, "bias_shape": float, "bias_rate": float,
              "n_inducing": int, "batch_size": int, "step_size": float, "clip_threshold": float,
              "dispersion_rule": str, "total_count": (list, int)},
    "fit": {"max_em_iters": int, "e_step_sweeps": int, "m_step_iters": int, "elbo_rel_tol": float,
            "mode": str, "learn_lengthscales": bool},
    "simulate": {"n_neurons": int, "n_bins": int, "n_latents": int, "n_trials": int,
                 "lengthscales": (list, float), "observation": str, "weight_scale": float,
                 "bias_mean": float, "bias_var": float, "dispersion_range": (list, float),
                 "total_count_range": (list, int), "bin_width_ms": float},
    "evaluate": {"checkpoint": str, "test_path": str, "test_format": str, "baseline_path": str,
                 "baseline_format": str},
    "export": {"checkpoint": str},
    "output": {"dir": str},
}


class ConfigError(ValueError):
    pass


def _check_type(value, expected, where):
    if isinstance(expected, tuple):
        container, inner = expected
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, container):
            raise ConfigError(f"{where}: expected a list")
        return [_check_type(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is not bool and isinstance(value, bool) or not isinstance(value, expected):
        raise ConfigError(f"{where}: expected {expected.__name__}, got {type(value).__name__}")
    return value


def validate_config(raw):
    """Check ``raw`` against :data:`SCHEMA`; unknown keys raise :class:`ConfigError`."""
    out = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        spec = SCHEMA[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            section = {}
            for sub, v in value.items():
                if sub not in spec:
                    raise ConfigError(f"unknown configuration key '{key}.{sub}'")
                section[sub] = _check_type(v, spec[sub], f"{key}.{sub}")
            out[key] = section
        else:
            out[key] = _check_type(value, spec, key)
    return out


def load_config(path):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    return validate_config(raw)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _manifest(command, cfg, seed, outdir, files, extra=None):
    manifest = {"command": command, "config_hash": config_hash(cfg), "config": cfg, "seed": seed,
                "versions": {"ccgpfa": __version__, "numpy": np.__version__,
                             "scipy": scipy.__version__, "python": platform.python_version()},
                "outputs": sorted(os.path.basename(f) for f in files), "format_version": 1}
    manifest.update(extra or {})
    path = os.path.join(outdir, f"manifest_{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _model_config(cfg):
    section = dict(cfg.get("model", {}))
    if "n_latents" not in section:
        raise ConfigError("model.n_latents is required")
    try:
        return ModelConfig.from_dict(section)
    except ValueError as exc:
        raise ConfigError(f"invalid [model]: {exc}") from exc


def _fit_options(cfg, seed):
    try:
        return FitOptions(seed=seed, **cfg.get("fit", {}))
    except ValueError as exc:
        raise ConfigError(f"invalid [fit]: {exc}") from exc


def _load(path, fmt, data_cfg):
    if path is None:
        raise ConfigError("a data path is required")
    kwargs = {k: data_cfg[k] for k in ("bin_width_ms", "n_neurons", "n_bins", "n_trials")
              if k in data_cfg}
    if fmt == "binary":
        kwargs = {}
    return load_spikes(path, format=fmt, **kwargs)


def cmd_simulate(cfg, seed, outdir):
    sim = dict(cfg.get("simulate", {}))
    missing = [k for k in ("n_neurons", "n_bins", "n_latents", "n_trials") if k not in sim]
    if missing:
        raise ConfigError(f"simulate needs {', '.join('simulate.' + k for k in missing)}")
    if sim["n_latents"] < 1:
        raise ConfigError("simulate.n_latents must be at least 1")
    lengthscales = sim.pop("lengthscales", [5.0])
    for key in ("dispersion_range", "total_count_range"):
        if key in sim:
            sim[key] = tuple(sim[key])
    data, truth = simulate(sim.pop("n_neurons"), sim.pop("n_bins"), sim.pop("n_latents"),
                           sim.pop("n_trials"), lengthscales, seed=seed, **sim)
    files = [os.path.join(outdir, "data.csv"), os.path.join(outdir, "data.bin"),
             os.path.join(outdir, "truth.bin")]
    save_spikes(data, files[0], format="dense_csv")
    save_spikes(data, files[1], format="binary")
    arrays = {"weights": truth.weights, "latents": truth.latents, "bias": truth.bias,
              "lengthscales": truth.lengthscales, "f": truth.f}
    if truth.dispersion is not None:
        arrays["dispersion"] = truth.dispersion
    if truth.total_count is not None:
        arrays["total_count"] = truth.total_count
    write_container(files[2], arrays, {"observation": truth.observation}, kind="truth")
    files.append(_manifest("simulate", cfg, seed, outdir, files))
    return files


def cmd_fit(cfg, seed, outdir):
    data_cfg = cfg.get("data", {})
    data = _load(data_cfg.get("path"), data_cfg.get("format", "event_csv"), data_cfg)
    files = []
    frac = data_cfg.get("holdout_fraction", 0.0)
    if frac > 0:
        train, test = split_trials(data, frac, seed)
        files += [os.path.join(outdir, "train.bin"), os.path.join(outdir, "test.bin")]
        save_spikes(train, files[-2])
        save_spikes(test, files[-1])
    else:
        train = data
    config = _model_config(cfg)
    options = _fit_options(cfg, seed)
    ckpt = os.path.join(outdir, "state.bin")
    trace = os.path.join(outdir, "elbo_trace.txt")
    try:
        state, report = fit(train, config, options)
    except FitError as exc:
        if exc.state is not None:
            save_state(exc.state, ckpt, {"partial": True, "error": str(exc)})
        if exc.report is not None:
            _write_report(exc.report, trace)
        _manifest("fit", cfg, seed, outdir, files + [ckpt, trace], {"status": "failed", "error": str(exc)})
        raise
    save_state(state, ckpt, {"partial": False})
    _write_report(report, trace)
    with open(os.path.join(outdir, "fit_report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    files += [ckpt, trace, os.path.join(outdir, "fit_report.json")]
    files.append(_manifest("fit", cfg, seed, outdir, files,
                           {"status": "ok", "converged": report.converged}))
    return files


def _write_report(report, path):
    # wall times go to the JSON report only, so the trace is reproducible
    with open(path, "w") as fh:
        fh.write("# sweep elbo\n")
        for i, v in enumerate(report.elbo_trace):
            fh.write(f"{i} {float(v)!r}\n")


def _checkpoint(cfg, section, outdir):
    path = cfg.get(section, {}).get("checkpoint", os.path.join(outdir, "state.bin"))
    try:
        return load_state(path)
    except (OSError, ContainerError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_evaluate(cfg, seed, outdir):
    ev = cfg.get("evaluate", {})
    state = _checkpoint(cfg, "evaluate", outdir)
    test_path = ev.get("test_path", os.path.join(outdir, "test.bin"))
    test = _load(test_path, ev.get("test_format", "binary"), cfg.get("data", {}))
    baseline = None
    if "baseline_path" in ev:
        baseline = _load(ev["baseline_path"], ev.get("baseline_format", "binary"), cfg.get("data", {}))
    elif os.path.exists(os.path.join(outdir, "train.bin")):
        baseline = load_spikes(os.path.join(outdir, "train.bin"), format="binary")
    try:
        report = evaluate(state, test, baseline)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = os.path.join(outdir, "evaluation.json")
    with open(out, "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
    grid = os.path.join(outdir, "nll_per_bin.csv")
    np.savetxt(grid, report.nll_grid, delimiter=",", header="rows=neurons,cols=bins")
    return [out, grid, _manifest("evaluate", cfg, seed, outdir, [out, grid])]


def cmd_export(cfg, seed, outdir):
    state = _checkpoint(cfg, "export", outdir)
    files = export_tables(state, os.path.join(outdir, "export"))
    files.append(_manifest("export", cfg, seed, outdir, files))
    return files


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "evaluate": cmd_evaluate, "export": cmd_export}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="ccgpfa", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML configuration file")
    parser.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    parser.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        cfg["seed"] = seed
        outdir = args.out or cfg.get("output", {}).get("dir", ".")
        os.makedirs(outdir, exist_ok=True)
        files = COMMANDS[args.command](cfg, seed, outdir)
    except (ConfigError, DataFormatError, DataValidationError, InitError, OSError,
            ContainerError, DomainError) as exc:
        print(f"ccgpfa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FitError, NumericalError, ConditioningError, FloatingPointError) as exc:
        print(f"ccgpfa {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
