"""``ofi-lab`` command-line interface.

Every command computes its outputs in memory and writes them only after it
has succeeded, together with a ``manifest.json`` describing the run.
Exit codes: 0 success, 1 usage error (bad flags, missing input), 2 data error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .estimation import (
    DEFAULT_DECAYS,
    FitConfig,
    FitDivergedError,
    GridConfig,
    LikelihoodError,
    fit_family,
)
from .forecasting import (
    DEFAULT_ROSTER,
    MODEL_IDS,
    ForecastConfig,
    aligned_loss_arrays,
    forecasts_csv,
    histograms_json,
    kernel_norms_csv,
    losses_csv,
    near_term_distributions,
    rolling_kernel_norms,
)
from .hawkes.kernels import EventHistory, HawkesModel, SumExponentialKernel
from .marketdata import (
    ClassificationError,
    ParseReport,
    TickParseError,
    build_counting_process,
    classify_trades,
    parse_tick_file,
)
from .ofi import OfiSeries, diagnostics, ofi_series
from .simulation import SimConfig, ground_truth_csv, simulate_thinning, synth_day
from .spa import LossMatrix, SpaConfig, compare_all, pvalue_table_csv, pvalue_table_json

logger = logging.getLogger("ofi_lab")

DEFAULT_SESSION = "375m"
FAMILY_OF = {
    "hawkes-exp": "exponential",
    "hawkes-sumexp": "sum_exponential",
    "hawkes-powerlaw": "power_law",
    "hawkes-em": "grid",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


_DUR = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ms|s|m|min|h)?\s*$")
_UNIT = {None: 1.0, "ms": 1e-3, "s": 1.0, "m": 60.0, "min": 60.0, "h": 3600.0}


def parse_duration(text) -> float:
    """``"90"``, ``"60s"``, ``"1m"``, ``"1.5h"`` -> seconds."""
    if isinstance(text, (int, float)):
        return float(text)
    m = _DUR.match(str(text))
    if m is None:
        raise argparse.ArgumentTypeError(f"not a duration: {text!r}")
    return float(m.group(1)) * _UNIT[m.group(2)]


def _csv_list(text) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _floats(text) -> tuple:
    return tuple(float(x) for x in _csv_list(text))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# dest -> (flags, type, default, help); defaults are applied after the config file
_OPTIONS = {
    "ticks": (("--ticks",), str, None, "tick file"),
    "symbol": (("--symbol",), str, None, "keep only this symbol"),
    "expiry": (("--expiry",), str, None, "keep only this expiry"),
    "delimiter": (("--delimiter",), str, None, "',' or 'whitespace' (default: auto)"),
    "session_open": (("--session-open",), str, "09:15:00", "session open time HH:MM:SS"),
    "session_length": (("--session-length",), parse_duration, DEFAULT_SESSION, "session length"),
    "window": (("--window",), parse_duration, None, "OFI / fit window length"),
    "interval": (("--interval",), parse_duration, "60s", "OFI anchor spacing"),
    "series": (("--series",), str, None, "OFI series CSV"),
    "tests": (("--tests",), _csv_list, "adf,ks,ad,acf", "comma-separated diagnostics"),
    "max_lag": (("--max-lag",), int, 20, "ACF/PACF lags"),
    "model": (("--model",), str, None, "model id or model JSON path"),
    "models": (("--models",), _csv_list, ",".join(DEFAULT_ROSTER), "comma-separated model roster"),
    "decays": (("--decays",), _floats, ",".join(str(d) for d in DEFAULT_DECAYS), "sum-exp decays"),
    "horizon": (("--horizon",), parse_duration, None, "simulation / forecast horizon"),
    "step": (("--step",), parse_duration, "60s", "window step"),
    "sims": (("--sims",), int, 500, "simulations per window"),
    "bins": (("--bins",), int, 41, "histogram bins on [-1, 1]"),
    "group_size": (("--group-size",), int, 10, "windows per loss block"),
    "conditioned": (("--conditioned",), _bool, "true", "condition Hawkes simulations on the fit window"),
    "var_p_max": (("--var-p-max",), int, 10, "maximum VAR order"),
    "var_noise": (("--var-noise",), str, "both", "both, coef or innovation"),
    "max_fail_fraction": (("--max-fail-fraction",), float, 0.5, "abort when more windows fail"),
    "losses": (("--losses",), str, None, "losses.csv from forecast"),
    "reps": (("--reps",), int, 10_000, "bootstrap replications"),
    "block_length": (("--block-length",), float, 3.0, "mean bootstrap block length"),
    "spa_variance": (("--spa-variance",), str, "bootstrap", "studentization scale: bootstrap or hac"),
    "sub_interval": (("--sub-interval",), parse_duration, "300s", "kernel-norm step"),
    "family": (("--family",), str, "sum_exponential", "kernel family for kernel-norms"),
    "noise_rate": (("--noise-rate",), float, 0.5, "noise orders per second in synth"),
    "grid_support": (("--grid-support",), parse_duration, "60s", "EM kernel support"),
    "grid_bins": (("--grid-bins",), int, 60, "EM kernel bins"),
    "em_iters": (("--em-iters",), int, 200, "EM iterations"),
    "max_iters": (("--max-iters",), int, 3000, "optimizer iterations"),
    "grad_tol": (("--grad-tol",), float, 1e-6, "gradient tolerance"),
}

_COMMANDS = {
    "ingest": ("parse a tick file and report line counts", ["ticks", "symbol", "expiry", "delimiter"], False),
    "classify": ("sign trades by passive order ID", ["ticks", "symbol", "expiry", "delimiter", "session_open"], False),
    "ofi": ("rolling order flow imbalance", ["ticks", "symbol", "expiry", "delimiter", "session_open", "session_length", "window", "interval"], False),
    "diagnose": ("ADF, normality and autocorrelation diagnostics", ["series", "tests", "max_lag"], False),
    "fit": ("fit a Hawkes model to a tick file", ["ticks", "symbol", "expiry", "delimiter", "session_open", "session_length", "model", "decays", "grid_support", "grid_bins", "em_iters", "max_iters", "grad_tol"], False),
    "simulate": ("simulate events from a model JSON", ["model", "horizon"], True),
    "synth": ("synthesize a tick day with ground truth", ["model", "session_length", "session_open", "noise_rate", "decays"], True),
    "forecast": ("rolling forecast distributions and block losses", ["ticks", "symbol", "expiry", "delimiter", "session_open", "session_length", "models", "window", "horizon", "step", "sims", "bins", "group_size", "conditioned", "decays", "var_p_max", "var_noise", "max_fail_fraction", "grid_support", "grid_bins", "em_iters", "max_iters", "grad_tol"], True),
    "compare": ("SPA p-value for every benchmark choice", ["losses", "reps", "block_length", "spa_variance"], True),
    "kernel-norms": ("rolling fitted kernel norms", ["ticks", "symbol", "expiry", "delimiter", "session_open", "session_length", "family", "window", "sub_interval", "decays", "max_iters", "grad_tol"], False),
}

_CMD_DEFAULTS = {
    "ofi": {"window": "60s"},
    "forecast": {"window": "60m", "horizon": "60s"},
    "kernel-norms": {"window": "60m"},
    "simulate": {"horizon": "60m"},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ofi-lab", description="Hawkes-process order flow imbalance toolkit")
    p.add_argument("--version", action="version", version=f"ofi-lab {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name, (help_, opts, randomized) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--out", required=False, default=None, help="output directory")
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if randomized:
            sp.add_argument("--seed", type=int, default=None, help="base seed (generated and recorded when omitted)")
        for dest in opts:
            flags, typ, _, h = _OPTIONS[dest]
            sp.add_argument(*flags, dest=dest, type=str, default=None, help=h)
    return p


def read_config(path: str) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Flag value, else config-file value, else default; then convert types."""
    cmd = args.command
    _, opts, randomized = _COMMANDS[cmd]
    cfg = {}
    if args.config:
        if not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = read_config(args.config)
    unknown = sorted(set(cfg) - set(_OPTIONS) - {"out", "threads", "seed"})
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    res = {}
    for dest in opts:
        _, typ, default, _ = _OPTIONS[dest]
        default = _CMD_DEFAULTS.get(cmd, {}).get(dest, default)
        raw = getattr(args, dest)
        if raw is None:
            raw = cfg.get(dest, default)
        try:
            res[dest] = None if raw is None else typ(raw)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad value for {dest}: {exc}") from None
    res["out"] = args.out or cfg.get("out")
    if res["out"] is None:
        raise UsageError("--out is required")
    threads = args.threads if args.threads is not None else cfg.get("threads")
    res["threads"] = int(threads) if threads is not None else (os.cpu_count() or 1)
    if randomized:
        seed = args.seed if args.seed is not None else cfg.get("seed")
        res["seed"] = int(seed) if seed is not None else int(np.random.SeedSequence().entropy % (2**63))
    return res


def _need_file(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    return path


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_trades(o: dict):
    path = _need_file(o.get("ticks"), "ticks")
    report = ParseReport()
    try:
        ticks = parse_tick_file(path, o.get("symbol"), o.get("expiry"), o.get("delimiter"), report)
        trades, crep = classify_trades(ticks, o.get("session_open") or "09:15:00")
    except (TickParseError, ClassificationError) as exc:
        raise DataError(str(exc)) from exc
    return ticks, trades, report, crep


def _processes(o: dict, need_trades=True):
    _, trades, _, _ = _load_trades(o)
    if need_trades and not trades:
        raise DataError("no classified trades in the input")
    return build_counting_process(trades, "SELL"), build_counting_process(trades, "BUY")


def _load_model(path_arg: str | None) -> HawkesModel:
    path = _need_file(path_arg, "model")
    try:
        d = json.loads(Path(path).read_text())
        return HawkesModel.from_dict(d.get("model", d))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"bad model JSON: {exc}") from exc


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ----------------------------------------------------------------------------
# commands return {filename: text}


def cmd_ingest(o):
    ticks, trades, report, crep = _load_trades(o)
    events = {}
    for t in ticks:
        events[t.event] = events.get(t.event, 0) + 1
    return {
        "ingest_report.json": _json(
            {
                "lines": report.lines,
                "parsed": report.parsed,
                "filtered_out": report.filtered_out,
                "malformed": report.malformed,
                "first_errors": report.first_errors,
                "kept": len(ticks),
                "events": events,
            }
        )
    }


def cmd_classify(o):
    _, trades, _, crep = _load_trades(o)
    lines = ["t,side,qty,price"]
    lines += [f"{tr.ns // 10**9}.{tr.ns % 10**9:09d},{tr.side},{tr.qty},{tr.price}" for tr in trades]
    return {"trades.csv": "\n".join(lines) + "\n", "classification.json": _json(crep.to_dict())}


def cmd_ofi(o):
    sell, buy = _processes(o, need_trades=False)
    try:
        s = ofi_series(sell, buy, o["window"], o["interval"], o["session_length"])
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return {"ofi.csv": s.to_csv()}


def cmd_diagnose(o):
    path = _need_file(o.get("series"), "series")
    try:
        series = OfiSeries.from_csv(Path(path).read_text())
        bad = [t for t in o["tests"] if t not in ("adf", "ks", "ad", "acf", "pacf")]
        if bad:
            raise UsageError(f"unknown tests: {', '.join(bad)}")
        out = diagnostics(series, tuple(o["tests"]), o["max_lag"])
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise DataError(str(exc)) from exc
    return {"diagnostics.json": _json(out)}


def _fit_config(o) -> FitConfig:
    return FitConfig(max_iters=o.get("max_iters") or 3000, grad_tol=o.get("grad_tol") or 1e-6)


def cmd_fit(o):
    model_id = o.get("model") or "hawkes-exp"
    if model_id not in FAMILY_OF:
        raise UsageError(f"--model must be one of {', '.join(FAMILY_OF)}")
    sell, buy = _processes(o)
    L = o["session_length"]
    hist = EventHistory.from_window((sell.times, buy.times), 0.0, L)
    grid = GridConfig(support=o["grid_support"], bins=o["grid_bins"])
    try:
        res = fit_family(FAMILY_OF[model_id], hist, _fit_config(o), decays=o["decays"], grid=grid, max_em_iters=o["em_iters"])
    except (FitDivergedError, LikelihoodError, ValueError) as exc:
        raise DataError(f"fit failed: {exc}") from exc
    body = {
        "model": res.model.to_dict(),
        "nll": res.neg_log_likelihood,
        "iterations": res.iterations,
        "converged": res.converged,
        "grad_norm": res.grad_norm_final,
        "branching_matrix": res.model.kernel.l1_matrix().tolist(),
    }
    return {"model.json": _json(body)}


def cmd_simulate(o):
    model = _load_model(o.get("model"))
    sim = simulate_thinning(model, None, SimConfig(horizon=o["horizon"], seed=o["seed"]))
    return {"events.csv": sim.to_csv()}


def default_synth_model(decays=DEFAULT_DECAYS) -> HawkesModel:
    """Symmetric sum-exp generator used when ``synth`` gets no model."""
    dec = np.asarray(decays, dtype=float)
    norms = np.array([[0.2, 0.05], [0.05, 0.2]])
    alpha = np.stack([d * norms for d in dec])
    return HawkesModel([0.3, 0.3], SumExponentialKernel(alpha, dec))


def cmd_synth(o):
    model = _load_model(o["model"]) if o.get("model") else default_synth_model(o["decays"])
    from .simulation import TickStyle

    style = TickStyle(session_open=o["session_open"], noise_rate=o["noise_rate"])
    data, truth = synth_day(model, o["session_length"], o["seed"], style)
    return {"ticks.csv": data.decode("ascii"), "truth.csv": ground_truth_csv(truth), "generator.json": _json(model.to_dict())}


def cmd_forecast(o):
    models = o["models"]
    bad = [m for m in models if m not in MODEL_IDS]
    if bad or not models:
        raise UsageError(f"unknown models {bad}; choose from {', '.join(MODEL_IDS)}")
    if len(set(models)) != len(models):
        raise UsageError("duplicate models in roster")
    sell, buy = _processes(o)
    cfg = ForecastConfig(
        window=o["window"],
        horizon=o["horizon"],
        step=o["step"],
        n_sims=o["sims"],
        bins=o["bins"],
        seed=o["seed"],
        group_size=o["group_size"],
        conditioned=o["conditioned"],
        decays=o["decays"],
        var_p_max=o["var_p_max"],
        var_noise=o["var_noise"],
        em_iters=o["em_iters"],
        grid=GridConfig(support=o["grid_support"], bins=o["grid_bins"]),
        fit=_fit_config(o),
        max_fail_fraction=o["max_fail_fraction"],
    )
    try:
        fc = near_term_distributions(models, sell, buy, o["session_length"], cfg, threads=o["threads"])
    except RuntimeError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    losses, report = aligned_loss_arrays(fc, cfg.group_size)
    return {
        "forecasts.csv": forecasts_csv(fc),
        "losses.csv": losses_csv(losses),
        "ed_histograms.json": histograms_json(fc, cfg) + "\n",
        "loss_report.json": _json(report.to_dict()),
    }


def cmd_compare(o):
    path = _need_file(o.get("losses"), "losses")
    try:
        lm = LossMatrix.from_csv(Path(path).read_text())
    except (ValueError, KeyError) as exc:
        raise DataError(f"bad losses file: {exc}") from exc
    if len(lm.model_ids) < 2:
        raise UsageError("compare needs at least two models in the losses file")
    try:
        cfg = SpaConfig(reps=o["reps"], block_length=o["block_length"], seed=o["seed"], variance=o["spa_variance"])
        res = compare_all(lm, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return {"spa_table.csv": pvalue_table_csv(res), "spa.json": pvalue_table_json(res) + "\n"}


def cmd_kernel_norms(o):
    sell, buy = _processes(o)
    try:
        rows = rolling_kernel_norms(
            sell,
            buy,
            o["session_length"],
            family=o["family"],
            window=o["window"],
            sub_interval=o["sub_interval"],
            decays=o["decays"],
            fit_config=_fit_config(o),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return {"kernel_norms.csv": kernel_norms_csv(rows)}


_HANDLERS = {
    "ingest": cmd_ingest,
    "classify": cmd_classify,
    "ofi": cmd_ofi,
    "diagnose": cmd_diagnose,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "synth": cmd_synth,
    "forecast": cmd_forecast,
    "compare": cmd_compare,
    "kernel-norms": cmd_kernel_norms,
}

_INPUT_KEYS = ("ticks", "series", "losses", "model")


def _manifest(cmd: str, o: dict, outputs: dict) -> str:
    import numba
    import scipy

    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in o.items() if k not in ("threads", "out")}
    inputs = {}
    for k in _INPUT_KEYS:
        v = o.get(k)
        if isinstance(v, str) and os.path.isfile(v):
            # inputs are identified by digest, so the manifest does not depend on the working directory
            cfg[k] = os.path.basename(v)
            inputs[k] = {"path": os.path.basename(v), "sha256": _digest(v)}
    return _json(
        {
            "command": cmd,
            "config": cfg,
            "seed": o.get("seed"),
            "inputs": inputs,
            "outputs": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in sorted(outputs.items())},
            "versions": {
                "ofi_lab": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "numba": numba.__version__,
            },
        }
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        o = resolve(args)
        outputs = _HANDLERS[args.command](o)
    except UsageError as exc:
        print(f"ofi-lab: usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"ofi-lab: data error: {exc}", file=sys.stderr)
        return 2
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    outputs["manifest.json"] = _manifest(args.command, o, outputs)
    for name, text in outputs.items():
        tmp = out / (name + ".tmp")
        tmp.write_text(text)
        os.replace(tmp, out / name)
    return 0


if __name__ == "__main__":
    sys.exit(main())
