"""Command-line experiment driver.

Every run writes into ``--out``:

* ``config.txt``   resolved settings (key=value), enough to repeat the run
* ``*.csv``        result tables; floats are written with ``repr``
* ``plot_*.csv``   x/y series for external plotting
* ``metrics.txt``  headline numbers

Columns holding wall-clock seconds carry the suffix ``[wallclock]`` and are the
only run-to-run differences for a fixed config.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from gridse import __version__
from gridse.data import Dataset, load_csv_dataset, write_csv_dataset
from gridse.estimation import EstimatorOptions, bad_data_loop, lav_prox_linear, wls_gauss_newton
from gridse.forecast import (PERSISTENCE, REGISTRY, ForecastModelSpec, build_forecaster,
                             chronological_split, evaluate_forecasters, make_windows,
                             train_forecaster)
from gridse.grid import StateVector, load_case
from gridse.learned import (EPOCH_GRID, EPOCH_SWEEP_NEURONS, K_GRID, CnnEstimatorSpec, argmin_row,
                            cnn_param_count, neuron_grid, prepare, run_estimator, sweep_epochs,
                            sweep_k, sweep_neurons)
from gridse.measurement import FormStack, full_plan, read_plan, write_measurement_sets, write_plan
from gridse.metrics import metric_nrmse
from gridse.nn import save_checkpoint
from gridse.powerflow import builtin_scenario, generate_timeseries, read_scenario

log = logging.getLogger("gridse")

WALLCLOCK = "[wallclock]"
COMMANDS = ("simulate", "estimate", "train-psse", "train-fase", "sweep-neurons", "sweep-epochs",
            "sweep-k", "eval-fase", "report")


class CliError(Exception):
    pass


# --- small helpers -------------------------------------------------------------

def parse_int_list(text) -> list[int]:
    """'1,2,5' or inclusive ranges 'start:stop[:step]', comma separated."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            bits = [int(b) for b in part.split(":")]
            step = bits[2] if len(bits) > 2 else 1
            out.extend(range(bits[0], bits[1] + 1, step))
        else:
            out.append(int(part))
    return out


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(path, rows, columns, wallclock=()):
    """CSV with a header; wall-clock columns get the ``[wallclock]`` marker."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c + WALLCLOCK if c in wallclock else c for c in columns])
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_xy(path, columns, *series):
    write_table(path, [dict(zip(columns, vals)) for vals in zip(*series)], columns)


def write_kv(path, values: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(values):
            fh.write(f"{k}={_fmt(values[k])}\n")


def read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    cfg = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        cfg[k.strip().replace("-", "_")] = v.strip()
    return cfg


# --- data sources ----------------------------------------------------------------

def _case(args):
    return load_case(args.net)


def _plan(args, net):
    if args.plan in (None, "", "full"):
        return full_plan(net)
    return read_plan(args.plan)


def _scenario(args, case):
    if Path(str(args.scenario)).suffix == ".csv":
        return read_scenario(args.scenario, case)
    return builtin_scenario(args.scenario, case, args.T, seed=args.seed)


def _simulate(args):
    case = _case(args)
    plan = _plan(args, case.net)
    ts = generate_timeseries(case.net, _scenario(args, case), plan, seed=args.seed,
                             noise=not args.no_noise)
    return case, plan, ts


def _dataset(args) -> Dataset:
    if args.dataset:
        d = Path(args.dataset)
        return load_csv_dataset(d / "inputs.csv", d / "labels.csv")
    return Dataset.from_timeseries(_simulate(args)[2])


def _bus_range(text, n_bus):
    lo, _, hi = str(text).partition(":")
    lo = int(lo) if lo else 1
    hi = min(int(hi), n_bus) if hi else n_bus  # the default 1:50 clips on small networks
    if not 1 <= lo <= hi:
        raise CliError(f"--bus-range {text} outside 1..{n_bus}")
    return lo, hi


# --- subcommands -------------------------------------------------------------------

def cmd_simulate(args, out: Path):
    """Generate a state/measurement time series and write it as a dataset."""
    case, plan, ts = _simulate(args)
    ds = Dataset.from_timeseries(ts)
    write_csv_dataset(ds, out / "inputs.csv", out / "labels.csv",
                      {"net": args.net, "scenario": args.scenario, "T": args.T, "seed": args.seed})
    write_plan(plan, out / "plan.csv")
    write_measurement_sets(ts.measurements, out / "measurements.csv")
    t = min(max(args.instance, 0), len(ts) - 1)
    v = ts.states[t]
    write_xy(out / "plot_voltage_profile.csv", ["bus", "magnitude", "angle"],
             np.arange(1, v.n_bus + 1), v.magnitude, v.angle)
    vm = np.stack([s.magnitude for s in ts.states])
    return {"samples": len(ts), "measurements": len(plan), "buses": case.net.n_bus,
            "vm_min": float(vm.min()), "vm_max": float(vm.max())}


def cmd_estimate(args, out: Path):
    """Run WLS, LAV or WLS with bad-data removal on simulated measurements."""
    case, plan, ts = _simulate(args)
    stack = FormStack.build(case.net, plan)
    method = args.model or "wls"
    solvers = {"wls": wls_gauss_newton, "lav": lav_prox_linear,
               "bad-data": lambda ms, st, o: bad_data_loop(ms, st, o)[0]}
    if method not in solvers:
        raise CliError(f"--model for estimate must be one of {', '.join(solvers)}")
    rows, preds, truth, trace = [], [], [], []
    for t, (ms, v) in enumerate(zip(ts.measurements, ts.states)):
        rep = solvers[method](ms, stack, EstimatorOptions())
        steps = [float("nan")] + list(rep.step_trace)
        trace += [{"t": t, "iteration": i, "objective": o, "step_norm": steps[i] if i < len(steps) else ""}
                  for i, o in enumerate(rep.objective_trace)]
        preds.append(rep.v_hat.blocks())
        truth.append(v.blocks())
        err = metric_nrmse(preds[-1], truth[-1])
        rows.append({"t": t, "converged": rep.converged, "iterations": rep.iterations,
                     "nrmse": err.nrmse, "rmse_true": err.rmse_true,
                     "flagged": " ".join(str(i) for i in rep.flagged)})
    write_table(out / "estimates.csv", rows,
                ["t", "converged", "iterations", "nrmse", "rmse_true", "flagged"])
    write_table(out / "convergence.csv", trace, ["t", "iteration", "objective", "step_norm"])
    _truth_plot(out, args, np.array(preds), np.array(truth), "vr_vi")
    rep = metric_nrmse(np.array(preds), np.array(truth))
    return {"method": method, **rep.as_dict(), "converged": sum(r["converged"] for r in rows),
            "samples": len(rows)}


def _truth_plot(out, args, pred, truth, convention):
    """Estimate vs truth at one test instance over a bus range (magnitude and angle)."""
    t = min(max(args.instance, 0), len(pred) - 1)
    n = pred.shape[1] // 2
    lo, hi = _bus_range(args.bus_range, n)

    def polar(row):
        a, b = np.split(row, 2)
        s = StateVector(a, b) if convention == "vr_vi" else StateVector.from_polar(a, b)
        return s.magnitude, s.angle

    pm, pa = polar(pred[t])
    tm, ta = polar(truth[t])
    sl = slice(lo - 1, hi)
    bus = np.arange(lo, hi + 1)
    write_xy(out / "plot_estimate_magnitude.csv", ["bus", "truth", "estimate"], bus, tm[sl], pm[sl])
    write_xy(out / "plot_estimate_angle.csv", ["bus", "truth", "estimate"], bus, ta[sl], pa[sl])


def _cnn_spec(args, data, neurons=None, epochs=None):
    if neurons is None:
        neurons = parse_int_list(args.neurons)[0] if args.neurons else EPOCH_SWEEP_NEURONS[0]
    return CnnEstimatorSpec(n_neurons=neurons,
                            input_len=data.input_len, output_len=data.output_len,
                            kernel=args.kernel,
                            epochs=args.epochs if epochs is None else epochs,
                            batch_size=args.batch_size, lr=args.lr)


def cmd_train_psse(args, out: Path):
    """Train the convolutional state estimator and save the model."""
    ds = _dataset(args)
    data = prepare(ds, args.seed)
    spec = _cnn_spec(args, data)
    model, hist = run_estimator(data, spec, args.seed)
    write_table(out / "history.csv",
                [{"epoch": r.epoch, "train_loss": r.train_loss, "valid_nrmse": r.valid_nrmse,
                  "train_time": r.train_time} for r in hist.records],
                ["epoch", "train_loss", "valid_nrmse", "train_time"], wallclock={"train_time"})
    pred = data.scaling.denormalize_labels(model.predict(data.valid_x))
    _truth_plot(out, args, pred, data.valid_truth, data.convention)
    save_checkpoint(model, out / "model.npz",
                    {"scaling": data.scaling.as_meta(), "convention": data.convention})
    rep = metric_nrmse(pred, data.valid_truth)
    return {**rep.as_dict(), "n_params": cnn_param_count(spec), "n_neurons": spec.n_neurons,
            "epochs": spec.epochs, "n_train": len(data.train_x), "n_valid": len(data.valid_x)}


def _series(args):
    """Label series for forecasting, in (|V|, angle) blocks."""
    return _dataset(args).to_convention("vm_va")


def _fase_spec(args, name):
    return ForecastModelSpec(name=name, hidden=args.hidden, depth=args.depth, epochs=args.epochs,
                             batch_size=args.batch_size, lr=args.lr, r=args.window)


def _fase_plots(out, name, plots):
    for qty in ("magnitude", "angle"):
        bus, truth, pred = plots[qty]
        write_xy(out / f"plot_{name}_{qty}.csv", ["bus_index", "truth", "forecast"], bus, truth, pred)


def cmd_train_fase(args, out: Path):
    """Train one forecaster on a state series and save the model."""
    name = args.model or "simple_rnn_fase"
    ds = _series(args)
    wd = make_windows(ds.labels, args.window, ds.convention)
    spec = _fase_spec(args, name)
    fc = build_forecaster(spec, wd.targets.shape[1],
                          np.random.default_rng(np.random.SeedSequence(args.seed).spawn(2)[0]),
                          ds.convention)
    fc, hist = train_forecaster(fc, wd, spec, args.seed)
    write_table(out / "history.csv",
                [{"epoch": r.epoch, "train_loss": r.train_loss, "valid_nrmse": r.valid_nrmse,
                  "train_time": r.train_time} for r in hist.records],
                ["epoch", "train_loss", "valid_nrmse", "train_time"], wallclock={"train_time"})
    save_checkpoint(fc.model, out / "model.npz",
                    {"scaling": fc.scaling.as_meta(), "convention": fc.convention, "spec": name,
                     "reconstructed": spec.reconstructed})
    _, valid = chronological_split(wd)
    rep = metric_nrmse(fc.predict(valid.inputs), valid.targets)
    return {"model": name, **rep.as_dict(), "reconstructed": spec.reconstructed,
            "epochs": spec.epochs, "window": spec.r}


def cmd_eval_fase(args, out: Path):
    """Train and score forecasters against the persistence baseline."""
    names = [n.strip() for n in (args.model or ",".join(REGISTRY)).split(",") if n.strip()]
    ds = _series(args)
    wd = make_windows(ds.labels, args.window, ds.convention)
    ev = evaluate_forecasters(names, wd, _fase_spec(args, "simple_rnn_fase"), args.seed, args.slot)
    cols = ["model", "display_name", "nrmse", "rmse_true", "reconstructed", "status"]
    write_table(out / "forecasters.csv", ev.rows, cols)
    write_table(out / "plot_summary_bar.csv", ev.rows, ["model", "nrmse"])
    for name, plots in ev.plots.items():
        _fase_plots(out, name, plots)
    best = argmin_row([r for r in ev.rows if r["model"] != PERSISTENCE])
    return {"slot": ev.slot, "best_model": best["model"] if best else "none",
            "best_nrmse": best["nrmse"] if best else float("nan"),
            "persistence_nrmse": ev.rows[-1]["nrmse"]}


def cmd_sweep_neurons(args, out: Path):
    """Estimator accuracy across hidden widths."""
    data = prepare(_dataset(args), args.seed)
    values = parse_int_list(args.neurons) if args.neurons else neuron_grid()
    if args.include_output_width and data.output_len not in values:
        values.append(data.output_len)
    rows = sweep_neurons(values, data, _cnn_spec(args, data, neurons=values[0]), args.seed)
    write_table(out / "sweep_neurons.csv", rows, ["n_neurons", "nrmse", "rmse_true"])
    write_table(out / "plot_neurons.csv", rows, ["n_neurons", "nrmse"])
    best = argmin_row(rows)
    return {"best_n_neurons": best["n_neurons"], "best_nrmse": best["nrmse"], "rows": len(rows)}


def cmd_sweep_epochs(args, out: Path):
    """Estimator accuracy and training time across epoch counts."""
    data = prepare(_dataset(args), args.seed)
    values = parse_int_list(args.epoch_grid) if args.epoch_grid else list(EPOCH_GRID)
    neurons = parse_int_list(args.neurons) if args.neurons else list(EPOCH_SWEEP_NEURONS)
    rows = sweep_epochs(values, neurons, data, _cnn_spec(args, data, neurons=neurons[0], epochs=0),
                        args.seed)
    write_table(out / "sweep_epochs.csv", rows, ["epochs", "n_neurons", "nrmse", "train_time"],
                wallclock={"train_time"})
    _pivot(out / "plot_epochs_nrmse.csv", rows, "nrmse", neurons)
    best = argmin_row(rows)
    return {"best_epochs": best["epochs"], "best_n_neurons": best["n_neurons"],
            "best_nrmse": best["nrmse"], "rows": len(rows)}


def _pivot(path, rows, key, neurons, wallclock=False):
    by_epoch = {}
    for r in rows:
        by_epoch.setdefault(int(r["epochs"]), {})[int(r["n_neurons"])] = r[key]
    cols = ["epochs"] + [str(n) for n in neurons]
    table = [{"epochs": e, **{str(n): v[n] for n in neurons}} for e, v in sorted(by_epoch.items())]
    write_table(path, table, cols, wallclock=set(cols[1:]) if wallclock else ())


def cmd_sweep_k(args, out: Path):
    """KNN baseline accuracy across neighbour counts."""
    data = prepare(_dataset(args), args.seed)
    values = parse_int_list(args.k) if args.k else list(K_GRID)
    rows = sweep_k(values, data)
    write_table(out / "sweep_k.csv", rows, ["k", "nrmse", "status"])
    write_table(out / "plot_k.csv", [r for r in rows if r["status"] == "ok"], ["k", "nrmse"])
    best = argmin_row(rows)
    return {"best_k": best["k"] if best else "none",
            "best_nrmse": best["nrmse"] if best else float("nan"),
            "invalid_rows": sum(r["status"] != "ok" for r in rows)}


def cmd_report(args, out: Path):
    """Aggregate finished runs found under ``--dataset`` (default: ``--out``) without retraining."""
    root = Path(args.dataset or out)
    if not root.is_dir():
        raise CliError(f"report: {root} is not a directory")
    lines = []
    found = 0

    def best_of(rows, key="nrmse"):
        ok = [r for r in rows if r.get("status", "ok") == "ok" and r[key] not in ("", "nan")]
        return min(ok, key=lambda r: float(r[key])) if ok else None

    for path in sorted(root.rglob("*.csv")):
        rel = path.relative_to(root)
        if path.name == "sweep_neurons.csv":
            rows = read_table(path)
            b = best_of(rows)
            lines.append(f"{rel}: {len(rows)} rows, best n_neurons={b['n_neurons']} nrmse={b['nrmse']}")
            write_table(out / f"figure_neurons_{found}.csv", rows, ["n_neurons", "nrmse"])
        elif path.name == "sweep_epochs.csv":
            rows = read_table(path)
            tcol = "train_time" + WALLCLOCK
            b = best_of(rows)
            lines.append(f"{rel}: {len(rows)} rows, best epochs={b['epochs']} "
                         f"n_neurons={b['n_neurons']} nrmse={b['nrmse']}")
            neurons = sorted({int(r["n_neurons"]) for r in rows})
            conv = [{**r, "train_time": float(r[tcol]), "nrmse": float(r["nrmse"])} for r in rows]
            _pivot(out / f"figure_epochs_nrmse_{found}.csv", conv, "nrmse", neurons)
            _pivot(out / f"figure_epochs_time_{found}.csv", conv, "train_time", neurons, wallclock=True)
        elif path.name == "sweep_k.csv":
            rows = read_table(path)
            b = best_of(rows)
            lines.append(f"{rel}: {len(rows)} rows, best k={b['k'] if b else 'none'} "
                         f"nrmse={b['nrmse'] if b else 'nan'}")
            write_table(out / f"figure_k_{found}.csv", [r for r in rows if r["status"] == "ok"],
                        ["k", "nrmse"])
        elif path.name == "forecasters.csv":
            rows = read_table(path)
            b = best_of([r for r in rows if r["model"] != PERSISTENCE])
            lines.append(f"{rel}: {len(rows)} rows, best model={b['model'] if b else 'none'} "
                         f"nrmse={b['nrmse'] if b else 'nan'}")
            write_table(out / f"figure_forecasters_{found}.csv", rows, ["model", "nrmse"])
        else:
            continue
        found += 1
    if not found:
        raise CliError(f"report: no sweep or forecaster tables under {root}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"tables": found}


HANDLERS = {
    "simulate": cmd_simulate, "estimate": cmd_estimate, "train-psse": cmd_train_psse,
    "train-fase": cmd_train_fase, "sweep-neurons": cmd_sweep_neurons,
    "sweep-epochs": cmd_sweep_epochs, "sweep-k": cmd_sweep_k, "eval-fase": cmd_eval_fase,
    "report": cmd_report,
}


# --- argument handling -------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value settings file; explicit flags override it")
    p.add_argument("--out", help="output directory (required)")
    p.add_argument("--net", default="14bus", help="bundled case name or case directory")
    p.add_argument("--plan", default="full", help="measurement plan CSV or 'full'")
    p.add_argument("--scenario", default="daily_sine_noisy",
                   help="constant | daily_sine | daily_sine_noisy | scenario CSV")
    p.add_argument("--dataset", help="dataset directory (inputs.csv, labels.csv)")
    p.add_argument("--T", type=int, default=480, help="number of simulated slots")
    p.add_argument("--no-noise", action="store_true", help="simulate noiseless measurements")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--epoch-grid", help="epoch values for sweep-epochs, e.g. 200:700:50")
    p.add_argument("--neurons", help="hidden widths, e.g. 215 or 185:230:5,236")
    p.add_argument("--include-output-width", action="store_true",
                   help="sweep-neurons: also try the label width")
    p.add_argument("--k", help="neighbour counts for sweep-k, e.g. 0:9")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--model", help="estimator (wls|lav|bad-data) or forecaster name(s)")
    p.add_argument("--hidden", type=int, default=32, help="forecaster hidden width")
    p.add_argument("--depth", type=int, default=None, help="stack_rnn_fase depth")
    p.add_argument("--window", type=int, default=10, help="forecaster window length")
    p.add_argument("--slot", type=int, default=200, help="forecast plot slot")
    p.add_argument("--instance", type=int, default=0, help="sample index for estimate plots")
    p.add_argument("--bus-range", default="1:50", help="bus range for estimate plots, e.g. 1:50")
    p.add_argument("-v", "--verbose", action="store_true")


DEFAULT_EPOCHS = {"train-psse": 400, "sweep-neurons": 400, "train-fase": 200, "eval-fase": 200}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gridse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        _add_common(sub.add_parser(name, help=HANDLERS[name].__doc__ and HANDLERS[name].__doc__.splitlines()[0]))
    rerun = sub.add_parser("rerun", help="repeat a run from its config.txt")
    rerun.add_argument("--config", required=True)
    rerun.add_argument("--out", required=True)
    return parser


ECHO_SKIP = {"config", "out", "verbose"}


def resolve_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "rerun":
        cfg = read_config(args.config)
        command = cfg.pop("command", None)
        if command not in HANDLERS:
            raise CliError(f"{args.config}: missing or unknown 'command'")
        return resolve_args([command, "--config", args.config, "--out", args.out])
    if args.config:
        cfg = read_config(args.config)
        cfg.pop("command", None)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sp._actions}
        defaults = {}
        for k, v in cfg.items():
            if k not in known:
                raise CliError(f"{args.config}: unknown setting {k!r}")
            action = known[k]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[k] = v.lower() in ("1", "true", "yes")
            elif v in ("None", ""):
                defaults[k] = None
            else:
                defaults[k] = action.type(v) if action.type else v
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.epochs is None:
        args.epochs = DEFAULT_EPOCHS.get(args.command, 0)
    if not args.out:
        raise CliError("--out is required")
    return args


def echo_config(args, path):
    values = {k: v for k, v in vars(args).items() if k not in ECHO_SKIP}
    write_kv(path, {k: ("None" if v is None else v) for k, v in values.items()})


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = resolve_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        echo_config(args, out / "config.txt")
        metrics = HANDLERS[args.command](args, out)
        write_kv(out / "metrics.txt", metrics)
        for k in sorted(metrics):
            print(f"{k}: {_fmt(metrics[k])}")
        return 0
    except SystemExit:
        raise
    except KeyboardInterrupt:
        print("gridse: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # report every failure as a diagnostic, not a traceback
        print(f"gridse: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
