"""Batch command-line interface.

Subcommands: ingest, synth, train, eval, sweep, gradcheck. Settings are
resolved as command-line flag > ``--config`` JSON file > built-in default.

Exit status: 0 success, 1 failed check, 2 configuration error,
3 data error, 4 training divergence.
"""

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dataio, kernels, nncore, noise, pipeline
from .errors import ConfigError, DataError, DivergenceError, IngestionError
from .fixtures import synthetic_dataset

log = logging.getLogger("seizure_lstm")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

TRAIN_KEYS = {f.name for f in dataclasses.fields(pipeline.TrainConfig)}
RUN_KEYS = {
    "manifest", "problem", "split", "out", "jobs", "synthetic", "synthetic_signals", "synthetic_samples",
    "synthetic_seed", "checkpoint", "report", "kinds", "snr_values", "L_values", "axis", "retrain", "train_on",
    "backend", "all", "kind", "snr", "fs", "input", "output", "dump_noise", "models", "step", "tolerance",
}
DEFAULTS = {
    "problem": "A-E",
    "split": "holdout:0.8",
    "out": "results",
    "jobs": 1,
    "synthetic": False,
    "synthetic_signals": 200,
    "synthetic_samples": 256,
    "kinds": ["muscle", "eyeblink", "white"],
    "snr_values": list(pipeline.DEFAULT_SNR_AXIS),
    "axis": "snr",
    "retrain": True,
    "train_on": "noisy",
}


def read_config_file(path):
    """Load a run config; any key outside the known set is an error."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for key in data:
        if key not in RUN_KEYS and key not in TRAIN_KEYS:
            raise ConfigError(f"unknown config key {key!r} in {path}")
    return data


def resolve(args):
    """Merge defaults, config file and flags (in increasing priority)."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if key in ("config", "command", "func", "verbose") or value is None:
            continue
        settings[key] = value
    return settings


def train_config(settings):
    fields = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    if "noise" in fields:
        seed = fields.get("seed", 0)
        fields["noise"] = [noise.NoiseSpec.parse(n, seed) if isinstance(n, str) else n for n in fields["noise"]]
    return pipeline.TrainConfig.from_dict(fields)


def load_problem_dataset(settings):
    problem = dataio.parse_problem(settings["problem"])
    if settings.get("synthetic"):
        if problem.K != 2:
            raise ConfigError("the synthetic fixture is a two-class problem")
        return problem, synthetic_dataset(settings["synthetic_signals"], settings["synthetic_samples"],
                                          seed=settings.get("synthetic_seed", 0))
    manifest = settings.get("manifest")
    if not manifest:
        raise ConfigError("no --manifest given (or use --synthetic)")
    signals = dataio.load_dataset(manifest, sets=problem.included_sets, jobs=settings.get("jobs", 1))
    return problem, dataio.build_problem(signals, problem)


def split_plan(settings, dataset, seed):
    kind, params = dataio.parse_split(settings["split"])
    return dataio.make_splits(len(dataset), dataset.labels, kind, seed=seed, **params)


def _check_length(config, dataset):
    if dataset.N % config.segment_length:
        raise ConfigError(f"segment length {config.segment_length} does not divide N={dataset.N}")


def _out(settings):
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _backend(settings):
    name = settings.get("backend")
    if name:
        kernels.get_backend(name)
    return name


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(settings):
    manifest = settings.get("manifest")
    if not manifest:
        raise ConfigError("ingest needs --manifest")
    signals = dataio.load_dataset(manifest, jobs=settings.get("jobs", 1))
    per_set = dataio.summarize(signals)
    summary = {
        "manifest": str(manifest),
        "total": len(signals),
        "N": sorted({s.N for s in signals}),
        "sampling_rate_hz": sorted({s.sampling_rate_hz for s in signals}),
        "sets": per_set,
    }
    report = Path(settings.get("report") or (_out(settings) / "ingest_summary.json"))
    pipeline.write_json(report, summary)
    for s, info in per_set.items():
        print(f"set {s}: {info['count']} signals, range [{info['min_uV']:g}, {info['max_uV']:g}] uV")
    print(f"total {len(signals)} signals, N={summary['N']}, fs={summary['sampling_rate_hz']} Hz -> {report}")
    return EXIT_OK


def cmd_synth(settings):
    for key in ("input", "output", "kind", "snr"):
        if settings.get(key) is None:
            raise ConfigError(f"synth needs --{key}")
    clean = dataio.read_signal_file(settings["input"])
    if clean.size == 0:
        raise DataError(f"{settings['input']} holds no samples")
    spec = noise.NoiseSpec(settings["kind"], float(settings["snr"]), int(settings.get("seed", 0)))
    fs = float(settings.get("fs") or dataio.SAMPLING_RATE_HZ)
    raw = noise.synthesize_noise(spec.kind, clean.shape[0], fs, spec.seed)
    noisy, alpha = noise.mix_at_snr(clean, raw, spec.snr_db)
    dataio.write_signal_file(settings["output"], noisy)
    if settings.get("dump_noise"):
        dataio.write_signal_file(settings["dump_noise"], alpha * raw)
    measured = noise.snr_db(clean, alpha * raw)
    print(f"{spec}: alpha={alpha:.6g}, measured SNR {measured:.9f} dB -> {settings['output']}")
    return EXIT_OK


def cmd_train(settings):
    config = train_config(settings)
    problem, dataset = load_problem_dataset(settings)
    _check_length(config, dataset)
    plan = split_plan(settings, dataset, config.seed)
    out = _out(settings)
    ckpt_dir = out / "checkpoints" if settings.get("checkpoint") else None
    start = time.perf_counter()
    result = pipeline.run_protocol(problem, config, plan, dataset, settings.get("jobs", 1), _backend(settings),
                                   ckpt_dir)
    doc = result.to_dict()
    pipeline.write_json(out / "run.json", doc)
    pipeline.write_table_csv(out / "table.csv", [result.table_row()])
    a = result.aggregate
    print(f"{problem.name} {plan.describe()}: Sens {_fmt_pct(a['sensitivity'])} Spec {_fmt_pct(a['specificity'])} "
          f"Acc {_fmt_pct(a['accuracy'])} ({len(plan)} fold(s), {time.perf_counter() - start:.1f} s) -> {out}")
    return EXIT_OK


def cmd_eval(settings):
    path = settings.get("checkpoint")
    if not path or path is True:
        raise ConfigError("eval needs --checkpoint <file>")
    params, stored = nncore.load_checkpoint(path)
    stored = dict(stored or {})
    overrides = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    config = pipeline.TrainConfig.from_dict({**stored, **overrides})
    if config.segment_length != params.lstm.L:
        raise ConfigError(f"checkpoint expects segment length {params.lstm.L}, config says {config.segment_length}")
    problem, dataset = load_problem_dataset(settings)
    if params.softmax.K != dataset.K:
        raise ConfigError(f"checkpoint has {params.softmax.K} classes, problem {problem.name} has {dataset.K}")
    _check_length(config, dataset)
    if settings.get("all"):
        test_idx = np.arange(len(dataset))
    else:
        test_idx = split_plan(settings, dataset, config.seed).folds[0][1]
    _, _, test_ds = pipeline.apply_noise(dataset, config, np.arange(0))
    report = pipeline.evaluate(params, test_ds, test_idx, config, _backend(settings))
    out = _out(settings)
    pipeline.write_json(out / "eval.json", {"checkpoint": str(path), "problem": problem.name,
                                            "config": config.to_dict(), "metrics": report.to_dict()})
    print(f"{problem.name}: Sens {_fmt_pct(report.sensitivity)} Spec {_fmt_pct(report.specificity)} "
          f"Acc {_fmt_pct(report.accuracy)} on {report.total} signals")
    return EXIT_OK


def cmd_sweep(settings):
    config = train_config(settings)
    problem, dataset = load_problem_dataset(settings)
    plan = split_plan(settings, dataset, config.seed)
    out = _out(settings)
    jobs = settings.get("jobs", 1)
    if settings["axis"] == "snr":
        _check_length(config, dataset)
        sweep = pipeline.snr_sweep(problem, config, plan, dataset, settings["kinds"],
                                   [float(s) for s in settings["snr_values"]], settings["retrain"],
                                   settings["train_on"], jobs, _backend(settings))
        name = "sweep_snr"
    elif settings["axis"] in ("segment-length", "segment_length", "L"):
        L_values = settings.get("L_values")
        sweep = pipeline.segment_length_sweep(problem, config, plan, dataset,
                                              [int(v) for v in L_values] if L_values else None, jobs,
                                              _backend(settings))
        name = "sweep_segment_length"
    else:
        raise ConfigError(f"unknown sweep axis {settings['axis']!r}")
    pipeline.write_json(out / f"{name}.json", sweep.to_dict())
    pipeline.write_sweep_csv(out / f"{name}.csv", sweep)
    for row in sweep.rows():
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_gradcheck(settings):
    models = int(settings.get("models") or 10)
    step = float(settings.get("step") or 1e-5)
    tol = float(settings.get("tolerance") or 1e-4)
    seed = int(settings.get("seed", 0))
    rng = np.random.default_rng(seed)
    rows = []
    worst = 0.0
    for j in range(models):
        K = (2, 3, 5)[j % 3]
        params = nncore.random_params(4, 2, 3, K, rng)
        x = rng.normal(size=(5, 2))
        label = int(rng.integers(K))
        rep = nncore.gradient_check(params, x, label, step=step, tolerance=tol, backend=_backend(settings))
        worst = max(worst, rep.max_rel_error)
        rows.append({"model": j, "K": K, "checked": rep.n_checked, "max_rel_error": rep.max_rel_error,
                     "worst": rep.worst})
        print(f"model {j} (K={K}): {rep.n_checked} coords, max rel error {rep.max_rel_error:.3e}")
    passed = worst <= tol
    pipeline.write_json(_out(settings) / "gradcheck.json",
                        {"backend": settings.get("backend") or kernels.BACKEND, "step": step, "tolerance": tol,
                         "max_rel_error": worst, "passed": passed, "models": rows})
    print(f"max relative error {worst:.3e} ({'PASS' if passed else 'FAIL'} at {tol:g})")
    return EXIT_OK if passed else EXIT_FAILED


def _fmt_pct(x):
    return "n/a" if x is None else f"{100 * x:.2f}%"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _normalization(text):
    return {"zscore": "per_signal_zscore"}.get(text, text)


def _shared(p):
    # every default is None so config-file values survive unless a flag is given
    p.add_argument("--config", help="JSON run config (flags override its values)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="parallel folds / file reads")
    p.add_argument("--problem", choices=sorted(dataio.PROBLEMS))
    p.add_argument("--split", help="holdout:<frac> | kfold:<k> | loo")
    p.add_argument("--noise", action="append", metavar="KIND:SNR_DB", help="muscle|eyeblink|white at an SNR")
    p.add_argument("--segment-length", dest="segment_length", type=int)
    p.add_argument("--normalization", type=_normalization, choices=["raw", "per_signal_zscore"])
    p.add_argument("--manifest", help="JSON mapping set letters to directories")
    p.add_argument("--synthetic", action="store_const", const=True, help="use the built-in synthetic fixture")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lstm-units", dest="lstm_units", type=int)
    p.add_argument("--dense-units", dest="dense_units", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--backend", choices=kernels.available_backends())


def build_parser():
    parser = argparse.ArgumentParser(prog="seizure-lstm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="load a dataset and write a summary")
    _shared(p)
    p.add_argument("--report", help="summary file (default <out>/ingest_summary.json)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="corrupt one signal file at a target SNR")
    p.add_argument("--config")
    p.add_argument("--kind", choices=[k.value for k in noise.NoiseKind])
    p.add_argument("--snr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--fs", type=float, help=f"sampling rate (default {dataio.SAMPLING_RATE_HZ})")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--dump-noise", dest="dump_noise", help="also write the scaled noise component")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train and evaluate over a split plan")
    _shared(p)
    p.add_argument("--checkpoint", action="store_const", const=True, help="write one checkpoint per fold")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _shared(p)
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--all", action="store_const", const=True, help="evaluate every signal, not the test split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="SNR or segment-length sweep")
    _shared(p)
    p.add_argument("--axis", choices=["snr", "segment-length"])
    p.add_argument("--kinds", nargs="+", choices=[k.value for k in noise.NoiseKind])
    p.add_argument("--snr-values", dest="snr_values", nargs="+", type=float)
    p.add_argument("--L-values", dest="L_values", nargs="+", type=int)
    p.add_argument("--reuse-model", dest="retrain", action="store_const", const=False,
                   help="one noise-augmented model per fold instead of one per point")
    p.add_argument("--train-on", dest="train_on", choices=["noisy", "clean"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--models", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--tolerance", type=float)
    p.add_argument("--backend", choices=kernels.available_backends())
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args)
        return args.func(settings)
    except IngestionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
