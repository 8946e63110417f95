"""Command-line entry point.

Subcommands: gen-synth, split, tune, calibrate, eval, hist, audit {prop1,grad}.
Every subcommand accepts --seed, --repeats, --json and --config; a config file
holds ``key = value`` lines (``#`` starts a comment) whose keys are long flag
names. Flags given on the command line win over the config file.

Exit codes: 0 success, 1 validation or I/O error, 2 audit violation.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from cadapter import adapter as adapter_mod
from cadapter import oracle
from cadapter.conformal import calibrate
from cadapter.data import SplitSpec, SynthConfig, load_logits, save_logits, split, synthesize
from cadapter.errors import NumericError, ParseError, UnsupportedError, ValidationError
from cadapter.metrics import repeated_eval, score_histogram, write_histogram_csv
from cadapter.scores import ScoreSpec, score_all_labels, softmax
from cadapter.train import TrainConfig, training_spec, tune

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are validation errors (exit 1); exit 2 is reserved for audits
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def read_config(path) -> dict:
    """Parse ``key = value`` lines into a dict of strings."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep or not key.strip():
                raise ParseError(f"{path}:{lineno}: expected 'key = value'")
            out[key.strip()] = value.strip()
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def _config_defaults(sub: argparse.ArgumentParser, values: dict) -> dict:
    by_name = {}
    for action in sub._actions:
        if action.dest in ("help", "config", "command", "audit_command"):
            continue
        by_name[action.dest] = action
        for opt in action.option_strings:
            by_name[opt.lstrip("-").replace("-", "_")] = action
    defaults = {}
    for key, text in values.items():
        action = by_name.get(key.replace("-", "_"))
        if action is None:
            raise ValidationError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            flag = _parse_bool(text)
            value = flag if isinstance(action, argparse._StoreTrueAction) else not flag
        else:
            try:
                value = action.type(text) if action.type else text
            except ValueError as exc:
                raise ValidationError(f"config key {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise ValidationError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        defaults[action.dest] = value
    return defaults


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=10, help="evaluation repeats (eval)")
    p.add_argument("--json", action="store_true", help="print one JSON document")
    p.add_argument("--config", help="key = value file; flags override it")
    return p


def _score_flags(p, default="aps"):
    p.add_argument("--score", type=str.lower, choices=["thr", "aps", "raps"], default=default)
    p.add_argument("--raps-lambda", type=float, default=0.001)
    p.add_argument("--raps-kreg", type=int, default=1)
    p.add_argument("--no-randomize", action="store_true", help="deterministic APS/RAPS (u = 1)")


def _data_flags(p, *names):
    p.add_argument("--data-dir", default="data", help="directory holding <split>.csv files")
    for name in names:
        p.add_argument(f"--{name}-file", help=f"explicit path of the {name} split")


def build_parser():
    common = _common()
    parser = _Parser(prog="cadapter", description="Conformal prediction with an order-preserving logit adapter.")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen-synth", parents=[common], help="write synthetic logit splits")
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--tune", type=int, default=5000)
    p.add_argument("--cal", type=int, default=2000)
    p.add_argument("--val", type=int, default=500)
    p.add_argument("--test", type=int, default=2000)
    p.add_argument("--signal", type=float, default=2.0)
    p.add_argument("--temp", type=float, default=0.25)
    p.add_argument("--noise-sd", type=float, default=SynthConfig.noise_sd)
    p.add_argument("--out", default="data")
    subs["gen-synth"] = p

    p = sub.add_parser("split", parents=[common], help="split one logit file into named parts")
    p.add_argument("--data", required=False, help="input logit CSV")
    p.add_argument("--fractions", default="tune=0.2,cal=0.4,val=0.1,test=0.3",
                   help="comma-separated name=fraction list")
    p.add_argument("--out", default="data")
    subs["split"] = p

    p = sub.add_parser("tune", parents=[common], help="fit adapter parameters")
    _data_flags(p, "tune", "val")
    p.add_argument("--iterations", type=int, default=240)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--T", dest="surrogate_T", type=float, default=1e-4, help="pairwise sigmoid temperature")
    p.add_argument("--loss", choices=["pairwise", "size"], default="pairwise")
    p.add_argument("--size-alpha", type=float, default=0.01)
    p.add_argument("--size-T", type=float, default=0.1)
    p.add_argument("--size-lambda", type=float, default=1.0)
    p.add_argument("--train-score", type=str.lower, choices=["thr", "aps"], default="aps")
    p.add_argument("--early-stop", choices=["size", "sscv", "none"], default="size")
    p.add_argument("--early-stop-alpha", type=float, default=0.1)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--eval-score", type=str.lower, choices=["thr", "aps", "raps"], default="aps")
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--no-rescale", action="store_true")
    p.add_argument("--diagonal", action="store_true", help="train only the diagonal of the weight matrix")
    p.add_argument("--out", default="run", help="output directory for adapter.json and trace.csv")
    p.add_argument("--plot", action="store_true", help="also write trace.png")
    subs["tune"] = p

    p = sub.add_parser("calibrate", parents=[common], help="compute the conformal threshold")
    _data_flags(p, "cal")
    _score_flags(p)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--adapter")
    p.add_argument("--out", help="write the calibration record to this JSON file")
    subs["calibrate"] = p

    p = sub.add_parser("eval", parents=[common], help="calibrate and evaluate prediction sets")
    _data_flags(p, "cal", "test")
    _score_flags(p)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--adapter")
    p.add_argument("--compare", action="store_true", help="report without and with the adapter")
    subs["eval"] = p

    p = sub.add_parser("hist", parents=[common], help="score histograms of true vs random labels")
    _data_flags(p, "test")
    _score_flags(p)
    p.add_argument("--adapter")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", default="hist.csv")
    p.add_argument("--plot", action="store_true", help="also write a PNG next to the CSV")
    subs["hist"] = p

    p = sub.add_parser("audit", help="brute-force checks")
    audit = p.add_subparsers(dest="audit_command", required=True)
    q = audit.add_parser("prop1", parents=[common], help="pairwise probability vs integrated size")
    q.add_argument("--file", help="logit CSV; default: synthetic n=50, K=5")
    q.add_argument("--pairs", type=int, default=20)
    q.add_argument("--score", type=str.lower, choices=["thr", "aps"], default="thr")
    q.add_argument("--scale", type=float, default=1.0, help="sd of random adapter parameters")
    subs["audit prop1"] = q
    q = audit.add_parser("grad", parents=[common], help="finite-difference gradient check")
    q.add_argument("--file", help="logit CSV; default: synthetic batch with K=5")
    q.add_argument("--batch", type=int, default=32)
    q.add_argument("--adapter", help="default: random parameters")
    q.add_argument("--score", type=str.lower, choices=["thr", "aps"], default="thr")
    q.add_argument("--T", dest="surrogate_T", type=float, default=0.1)
    q.add_argument("--h", type=float, default=1e-6)
    q.add_argument("--tol", type=float, default=1e-5)
    subs["audit grad"] = q
    return parser, subs


def parse_args(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        key = args.command if args.command != "audit" else f"audit {args.audit_command}"
        subs[key].set_defaults(**_config_defaults(subs[key], read_config(args.config)))
        args = parser.parse_args(argv)
    if args.repeats < 1:
        raise ValidationError("--repeats must be >= 1")
    return args


def _emit(args, doc: dict, text: str) -> None:
    if args.json:
        print(json.dumps(doc, allow_nan=False, default=_json_default))
    else:
        print(text)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _split_path(args, name):
    explicit = getattr(args, f"{name}_file", None)
    return explicit or os.path.join(args.data_dir, f"{name}.csv")


def _score_spec(args) -> ScoreSpec:
    return ScoreSpec(args.score.upper(), not args.no_randomize, args.raps_lambda, args.raps_kreg)


def _load_adapter(path, k=None):
    if path is None:
        return None
    params = adapter_mod.load_params(path)
    if k is not None and params.k != k:
        raise ValidationError(f"adapter has K={params.k}, data has K={k}")
    return params


def cmd_gen_synth(args) -> int:
    cfg = SynthConfig(args.classes, {"tune": args.tune, "cal": args.cal, "val": args.val, "test": args.test},
                      args.signal, args.temp, args.noise_sd, args.seed)
    splits = synthesize(cfg)
    os.makedirs(args.out, exist_ok=True)
    doc = {"classes": cfg.class_count, "signal": cfg.signal, "temperature": cfg.temperature,
           "noise_sd": cfg.noise_sd, "seed": cfg.seed, "splits": {}}
    lines = []
    for name, ds in splits.items():
        path = os.path.join(args.out, f"{name}.csv")
        save_logits(ds, path)
        acc = float(np.mean(ds.logits.argmax(axis=1) == ds.labels))
        doc["splits"][name] = {"path": path, "n": ds.n, "top1": acc}
        lines.append(f"{name:<6}{ds.n:>8}  top1 {acc:.4f}  {path}")
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def _parse_fractions(text: str) -> dict:
    out = {}
    for item in text.split(","):
        name, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"bad fraction entry {item!r}; expected name=fraction")
        try:
            out[name.strip()] = float(value)
        except ValueError:
            raise ValidationError(f"bad fraction entry {item!r}") from None
    return out


def cmd_split(args) -> int:
    if not args.data:
        raise ValidationError("split needs --data")
    ds = load_logits(args.data)
    parts = split(ds, SplitSpec(fractions=_parse_fractions(args.fractions), seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    doc = {}
    for name, part in parts.items():
        path = os.path.join(args.out, f"{name}.csv")
        save_logits(part, path)
        doc[name] = {"path": path, "n": part.n}
    _emit(args, {"splits": doc}, "\n".join(f"{n:<6}{d['n']:>8}  {d['path']}" for n, d in doc.items()))
    return EXIT_OK


def cmd_tune(args) -> int:
    tune_ds = load_logits(_split_path(args, "tune"))
    val_ds = None
    if args.early_stop != "none" or args.val_file:
        val_ds = load_logits(_split_path(args, "val"))
        if val_ds.class_count != tune_ds.class_count:
            raise ValidationError(f"tune has K={tune_ds.class_count}, validation has K={val_ds.class_count}")
    cfg = TrainConfig(
        surrogate_T=args.surrogate_T, learning_rate=args.lr, batch_size=args.batch_size,
        iterations=args.iterations, seed=args.seed, loss_kind=args.loss,
        train_score=args.train_score.upper(), early_stop_metric=args.early_stop,
        early_stop_alpha=args.early_stop_alpha, eval_every=args.eval_every,
        eval_score=args.eval_score.upper(), size_loss_alpha=args.size_alpha,
        size_loss_T=args.size_T, size_loss_weight=args.size_lambda,
        residual=not args.no_residual, softmax_rescale=not args.no_rescale,
        diagonal_only=args.diagonal,
    )
    params, trace = tune(tune_ds, cfg, val_ds)
    os.makedirs(args.out, exist_ok=True)
    adapter_path = os.path.join(args.out, "adapter.json")
    trace_path = os.path.join(args.out, "trace.csv")
    adapter_mod.save_params(params, adapter_path)
    with open(trace_path, "w") as fh:
        fh.write(trace.to_csv())
    doc = {"adapter": adapter_path, "trace": trace_path, "iterations": cfg.iterations,
           "best_iteration": trace.best_iteration, "final_loss": trace.losses[-1]}
    if args.plot:
        from cadapter.plotting import plot_trace

        doc["plot"] = os.path.join(args.out, "trace.png")
        plot_trace(doc["plot"], trace)
    best = next((r for r in trace.rows if r["iteration"] == trace.best_iteration), None)
    if trace.initial is not None and best is not None:
        doc["val_size_initial"] = trace.initial["val_size"]
        doc["val_size_best"] = best["val_size"]
    lines = [f"iterations      {cfg.iterations}", f"best iteration  {trace.best_iteration}",
             f"final loss      {trace.losses[-1]:.6f}"]
    if "val_size_best" in doc:
        lines.append(f"val size        {doc['val_size_initial']:.4f} -> {doc['val_size_best']:.4f}")
    lines += [f"wrote {adapter_path}", f"wrote {trace_path}"] + ([f"wrote {doc['plot']}"] if args.plot else [])
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cal = load_logits(_split_path(args, "cal"))
    spec = _score_spec(args)
    params = _load_adapter(args.adapter, cal.class_count)
    logits = cal.logits if params is None else adapter_mod.forward(params, cal.logits)
    rng = np.random.default_rng(args.seed)
    u = rng.uniform(size=cal.n) if spec.randomized else 1.0
    s = score_all_labels(spec, softmax(logits), u)[np.arange(cal.n), cal.labels]
    result = calibrate(s, args.alpha, spec)
    record = result.to_json()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(record + "\n")
    tau = "inf" if math.isinf(result.tau) else f"{result.tau:.17g}"
    _emit(args, json.loads(record), f"score   {spec.kind}\nalpha   {result.alpha:g}\nn       {result.n}\ntau     {tau}")
    return EXIT_OK


def _compare_table(before, after) -> str:
    lines = [f"{'metric':<10}{'w/o adapter':>14}{'w/ adapter':>14}"]
    for name in ("coverage", "size", "covgap", "sscv"):
        lines.append(f"{name:<10}{getattr(before, name):>14.4f}{getattr(after, name):>14.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    cal = load_logits(_split_path(args, "cal"))
    test = load_logits(_split_path(args, "test"))
    if cal.class_count != test.class_count:
        raise ValidationError(f"calibration has K={cal.class_count}, test has K={test.class_count}")
    spec = _score_spec(args)
    params = _load_adapter(args.adapter, cal.class_count)
    if args.compare and params is None:
        raise ValidationError("--compare needs --adapter")
    doc = {"score": spec.to_dict(), "alpha": args.alpha, "repeats": args.repeats, "seed": args.seed}
    if args.compare:
        before, _ = repeated_eval(cal, test, spec, args.alpha, None, args.seed, args.repeats)
        after, _ = repeated_eval(cal, test, spec, args.alpha, params, args.seed, args.repeats)
        doc.update(baseline=before.to_dict(), adapted=after.to_dict())
        text = _compare_table(before, after)
    else:
        report, _ = repeated_eval(cal, test, spec, args.alpha, params, args.seed, args.repeats)
        doc["report"] = report.to_dict()
        text = report.to_text()
    _emit(args, doc, text)
    return EXIT_OK


def cmd_hist(args) -> int:
    ds = load_logits(_split_path(args, "test"))
    spec = _score_spec(args)
    params = _load_adapter(args.adapter, ds.class_count)
    edges, correct, incorrect = score_histogram(ds.logits, ds.labels, spec, args.bins, params, args.seed)
    write_histogram_csv(args.out, edges, correct, incorrect)
    doc = {"path": args.out, "bins": args.bins, "top_bin_incorrect": float(incorrect[-1])}
    if args.plot:
        from cadapter.plotting import plot_histogram

        doc["plot"] = os.path.splitext(args.out)[0] + ".png"
        plot_histogram(doc["plot"], edges, correct, incorrect, title=spec.kind)
    lines = [f"wrote {args.out} ({args.bins} bins)"] + ([f"wrote {doc['plot']}"] if args.plot else [])
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def _audit_data(args, n):
    if args.file:
        return load_logits(args.file)
    cfg = SynthConfig(class_count=5, sizes={"audit": n}, signal=2.0, temperature=1.0, noise_sd=1.0, seed=args.seed)
    return synthesize(cfg)["audit"]


def cmd_audit_prop1(args) -> int:
    if args.pairs < 1:
        raise ValidationError("--pairs must be >= 1")
    ds = _audit_data(args, 50)
    rng = np.random.default_rng(args.seed)
    candidates = [oracle.random_params(rng, ds.class_count, args.scale) for _ in range(2 * args.pairs)]
    pairs = [(2 * i, 2 * i + 1) for i in range(args.pairs)]
    report = oracle.check_prop1(candidates, ds.logits, ds.labels, training_spec(args.score.upper()),
                                seed=args.seed, pairs=pairs)
    ok = not report["violations"] and report["max_identity_error"] <= 1e-12
    report["ok"] = ok
    text = (f"pairs               {report['pairs']}\nviolations          {len(report['violations'])}\n"
            f"max identity error  {report['max_identity_error']:.3g}\n" + ("OK" if ok else "VIOLATION"))
    _emit(args, report, text)
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_audit_grad(args) -> int:
    ds = _audit_data(args, args.batch)
    if args.adapter:
        params = _load_adapter(args.adapter, ds.class_count)
    else:
        params = oracle.random_params(np.random.default_rng(args.seed), ds.class_count)
    report = oracle.grad_audit(params, ds.logits, ds.labels, training_spec(args.score.upper()),
                               T=args.surrogate_T, h=args.h, seed=args.seed)
    err = report["max_rel_error"]
    ok = err is not None and err < args.tol
    report["ok"] = ok
    report["tol"] = args.tol
    lines = [f"checked entries  {report['checked']}", f"skipped examples {len(report['skipped'])}",
             f"max rel error    {err if err is None else format(err, '.3g')}"]
    if "notice" in report:
        lines.append(report["notice"])
    lines.append("OK" if ok else "VIOLATION")
    _emit(args, report, "\n".join(lines))
    return EXIT_OK if ok else EXIT_VIOLATION


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "split": cmd_split,
    "tune": cmd_tune,
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "hist": cmd_hist,
    "audit prop1": cmd_audit_prop1,
    "audit grad": cmd_audit_grad,
}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
        key = args.command if args.command != "audit" else f"audit {args.audit_command}"
        return COMMANDS[key](args)
    except (ValidationError, ParseError, UnsupportedError, NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
