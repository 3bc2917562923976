"""Command-line entry point.

Exit codes (stable, CI gates on them):

    0   pass / no drift / command succeeded
    1   warn (validate)
    2   fail (validate) or drift detected (drift)
    3   error: a suite errored, distillation diverged, or another runtime failure
    64  usage error: bad or missing flags, unreadable config, missing input file
    65  data error: schema mismatch between tables, malformed table, model spec or report bundle

The log level comes from the VALIDATOR_LOG environment variable (default WARNING).
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import DataError, DivergenceError, InvalidBundle, ModelAuditError, SpecError

log = logging.getLogger("modelaudit")

EXIT_OK = 0
EXIT_DRIFT = 2
EXIT_ERROR = 3
EXIT_USAGE = 64
EXIT_DATA = 65


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 64 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _split_list(values) -> list:
    out = []
    for v in values or []:
        out.extend(part.strip() for part in v.split(",") if part.strip())
    return out


def _thresholds(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--threshold expects KEY=VALUE, got {pair!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise UsageError(f"--threshold {key}: {value!r} is not a number") from None
    return out


def _write_json(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------- commands

def cmd_validate(args) -> int:
    from .dataset import ValidationDataset, load_table
    from .experiment import SUITE_ORDER, ExperimentConfig, run_experiment
    from .oracle import ScoringOracle
    from .report import write_report

    if not args.target:
        raise UsageError("validate: --target is required")
    frame = load_table(_existing(args.data))
    oracle = ScoringOracle.from_file(_existing(args.model))
    protected = _split_list(args.protected) or None
    try:
        config = ExperimentConfig(suites=_split_list(args.suites) or list(SUITE_ORDER),
                                  profile=args.profile, thresholds=_thresholds(args.threshold), seed=args.seed,
                                  output_dir=args.out, title=args.title, logo=args.logo)
    except ValueError as exc:
        raise UsageError(f"validate: {exc}") from None
    if args.target not in frame.columns:
        raise UsageError(f"validate: target column {args.target!r} is not in {args.data}")
    ds = ValidationDataset(frame, args.target, oracle, protected_attributes=protected)
    try:
        bundle = run_experiment(ds, config, executor=args.executor, workers=args.workers)
    finally:
        oracle.close()
    paths = write_report(bundle, args.out, title=args.title, logo=args.logo)
    for suite in bundle.suites:
        rules = sorted({v["rule"] for v in suite.violations})
        print(f"{suite.suite:<12} {suite.status.upper():<5} {', '.join(rules)}".rstrip())
    print(f"overall      {bundle.overall.upper()} -> {paths['json']}, {paths['html']}")
    return bundle.exit_code


def cmd_drift(args) -> int:
    from .dataset import load_table
    from .resilience import AdwinDetector, classify_drift

    if args.stream:
        detector = AdwinDetector(args.delta)
        detections = 0
        for i, line in enumerate(sys.stdin):
            line = line.strip()
            if not line:
                continue
            try:
                value = float(line)
            except ValueError:
                raise DataError(f"stdin line {i + 1}: {line!r} is not a number") from None
            if detector.update(value) == "drift_detected":
                detections += 1
                print(json.dumps({"index": i, "event": "drift_detected", "window": detector.width}), flush=True)
        return EXIT_DRIFT if detections else EXIT_OK
    if not (args.reference and args.current):
        raise UsageError("drift: --reference and --current are required unless --stream is given")
    reference = load_table(_existing(args.reference))
    current = load_table(_existing(args.current))
    oracle = None
    if args.model:
        from .oracle import ScoringOracle

        oracle = ScoringOracle.from_file(_existing(args.model))
    target = args.target
    if target and target not in reference.columns:
        raise UsageError(f"drift: target column {target!r} is not in {args.reference}")
    features = None
    if oracle is not None:
        features = [c for c in reference.columns if c != target]
    try:
        report = classify_drift(reference, current, target_column=target, oracle=oracle,
                                feature_columns=features, bins=args.bins)
    finally:
        if oracle is not None:
            oracle.close()
    doc = {"reference": str(args.reference), "current": str(args.current), "any_drift": report.any_drift,
           **report.to_dict()}
    _write_json(doc, args.out)
    flags = [k for k in ("covariate", "prior", "concept", "posterior", "joint") if doc[k]]
    print(f"drift: {', '.join(flags) if flags else 'none'}", file=sys.stderr)
    return EXIT_DRIFT if report.any_drift else EXIT_OK


def cmd_distill(args) -> int:
    from .dataset import load_table
    from .fixtures import default_chain_config
    from .hpmkd import ChainConfig, distill_table
    from .oracle import ScoringOracle, save_model_spec

    try:
        if args.chain:
            config = ChainConfig.load(_existing(args.chain))
        else:
            config = ChainConfig.from_dict(default_chain_config())
    except (ValueError, TypeError) as exc:
        raise UsageError(f"distill: bad chain config: {exc}") from None
    frame = load_table(_existing(args.data))
    if args.target not in frame.columns:
        raise UsageError(f"distill: target column {args.target!r} is not in {args.data}")
    teachers = [ScoringOracle.from_file(_existing(p)) for p in args.teachers]
    try:
        run = distill_table(frame, args.target, teachers, config)
    finally:
        for t in teachers:
            t.close()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model_spec(run.student.document, out / "student.json")
    doc = run.to_dict()
    doc["teachers"] = [str(p) for p in args.teachers]
    _write_json(doc, out / "distillation.json")
    print(f"teacher accuracy {run.report.teacher_accuracy:.4f}, student accuracy {run.report.final_accuracy:.4f}, "
          f"retention {run.report.retention:.4f} -> {out / 'student.json'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .copula import evaluate_synthesis, fit_copula, sample
    from .dataset import load_table, write_table

    if args.n < 1:
        raise UsageError("synth: --n must be >= 1")
    real = load_table(_existing(args.data))
    model = fit_copula(real)
    synth = sample(model, args.n, seed=args.seed)
    write_table(synth, args.out)
    if args.model_out:
        _write_json(model.to_dict(), args.model_out)
    if args.report:
        _write_json(evaluate_synthesis(real, synth).to_dict(), args.report)
    print(f"wrote {args.n} synthetic rows to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import load_bundle, write_report

    doc = load_bundle(_existing(args.bundle))
    paths = write_report(doc, args.out, title=args.title, logo=args.logo)
    print(f"wrote {paths['html']} and {len(paths['figures'])} figures")
    return EXIT_OK


def cmd_score_selftest(args) -> int:
    from .protocol import selftest, stub_command

    target = args.target or stub_command()
    results = selftest(target, n_rows=args.rows, batch_size=args.batch, n_features=args.features,
                       timeout_ms=args.timeout_ms)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_DRIFT


def cmd_gen_fixture(args) -> int:
    from .fixtures import write_fixture

    if args.rows < 100 or args.rows % 50:
        raise UsageError("gen-fixture: --rows must be a multiple of 50 and at least 100")
    paths = write_fixture(args.out, seed=args.seed, n=args.rows)
    for key, path in paths.items():
        print(f"{key:<8} {path}")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> Parser:
    parser = Parser(prog="modelaudit", description="Validate tabular models and emit audit reports.",
                    epilog="Exit codes: 0 pass, 1 warn, 2 fail/drift, 3 error, 64 usage, 65 data.")
    parser.add_argument("--version", action="version", version=f"modelaudit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)

    p = sub.add_parser("validate", help="run validation suites and write report.json / report.html")
    p.add_argument("--data", required=True, help="CSV or JSON-lines table")
    p.add_argument("--model", required=True, help="model spec JSON")
    p.add_argument("--target", help="target column (required)")
    p.add_argument("--protected", action="append", help="protected attribute(s), comma separated; default: detect")
    p.add_argument("--suites", action="append", help="suites to run, comma separated; default: all five")
    p.add_argument("--profile", default="medium", choices=["quick", "medium", "full"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--threshold", action="append", metavar="KEY=VALUE", help="override a verdict threshold")
    p.add_argument("--title", help="report title for the HTML banner")
    p.add_argument("--logo", help="image embedded in the HTML banner")
    p.add_argument("--executor", default="auto", choices=["auto", "process", "thread", "sequential"])
    p.add_argument("--workers", type=int, help="worker pool size (default: available CPUs)")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("drift", help="compare two tables, or run ADWIN over numbers on stdin")
    p.add_argument("--reference")
    p.add_argument("--current")
    p.add_argument("--model", help="model spec; enables the concept-drift test")
    p.add_argument("--target", help="label column; enables prior, concept and posterior drift")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--out", help="drift report JSON path (default: stdout)")
    p.add_argument("--stream", action="store_true", help="read one number per line from stdin and run ADWIN")
    p.add_argument("--delta", type=float, default=0.002, help="ADWIN confidence (default 0.002)")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("distill", help="distill teacher models into a chain of logistic students")
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--teachers", nargs="+", required=True, help="teacher model spec files")
    p.add_argument("--chain", help="chain config JSON (default: the bundled three-stage chain)")
    p.add_argument("--out", required=True, help="output directory for student.json and distillation.json")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("synth", help="fit a Gaussian copula and sample a synthetic table")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="synthetic CSV path")
    p.add_argument("--model-out", help="also write the fitted copula JSON here")
    p.add_argument("--report", help="also write a fidelity report (KS, TV, correlation deltas) here")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("report", help="re-render HTML, CSV and figures from a report.json")
    p.add_argument("--bundle", required=True, help="report.json written by validate")
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.add_argument("--logo")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("score-selftest", help="check a scorer for protocol conformance")
    p.add_argument("--target", help="HTTP URL or stdio command (default: the bundled stub scorer)")
    p.add_argument("--rows", type=int, default=23)
    p.add_argument("--batch", type=int, default=5)
    p.add_argument("--features", type=int, default=4, help="row width sent to the scorer")
    p.add_argument("--timeout-ms", type=int, default=10000)
    p.set_defaults(func=cmd_score_selftest)

    p = sub.add_parser("gen-fixture", help="write the deterministic toy credit fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rows", type=int, default=1000)
    p.set_defaults(func=cmd_gen_fixture)
    return parser


def configure_logging():
    level_name = os.environ.get("VALIDATOR_LOG", "WARNING").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SpecError as exc:
        print(f"error: model spec: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, InvalidBundle) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ModelAuditError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
