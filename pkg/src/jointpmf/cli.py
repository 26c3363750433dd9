"""Command-line driver: synth, fit, eval, and predict subcommands.

Every run writes a ``manifest.json`` recording the command line, resolved
configuration, seeds, input digests, and timestamps; metrics files embed
the manifest minus its timestamps so that re-running a manifest's command
reproduces byte-identical model and metrics outputs.

Exit codes: 0 success/convergence, 2 usage error, 3 data/configuration
error, 4 stopped at the iteration cap without converging.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone

import numpy as np

from . import __version__, data as data_mod, evaluate, svi, vb
from .model import Dataset, kruskal_max_rank, load_model, save_model

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NO_CONVERGENCE = 4

DEFAULT_INIT_RANK_CAP = 64


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _manifest(argv, config: dict, seeds: dict, inputs: list) -> dict:
    return {
        "command": ["jointpmf", *argv],
        "config": config,
        "seeds": seeds,
        "input_digests": {str(p): _sha256(p) for p in inputs},
        "library_version": __version__,
    }


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir, manifest: dict, started: str) -> None:
    full = dict(manifest)
    full["started_utc"] = started
    full["finished_utc"] = datetime.now(timezone.utc).isoformat()
    _write_json(os.path.join(out_dir, "manifest.json"), full)


def _write_trace_csv(path, header: str, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"iteration,{header}\n")
        for k, v in enumerate(trace, start=1):
            fh.write(f"{k},{v!r}\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _cards_arg(text):
    if "," in text:
        return tuple(int(c) for c in text.split(","))
    return int(text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jointpmf",
        description="Low-rank joint PMF estimation with automatic rank detection.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a ground-truth model and dataset")
    p.add_argument("--n-vars", type=_positive_int, required=True)
    p.add_argument("--cards", type=_cards_arg, required=True,
                   help="categories per variable: one int or a comma list")
    p.add_argument("--rank", type=_positive_int, required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--outage", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", help="fit a model to a dense categorical CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--algorithm", choices=["vb", "svb"], default="vb")
    p.add_argument("--init-rank", type=_positive_int, default=None,
                   help="default: Kruskal heuristic capped by --init-rank-cap")
    p.add_argument("--init-rank-cap", type=_positive_int, default=DEFAULT_INIT_RANK_CAP)
    p.add_argument("--alpha-lambda", type=float, default=1e-6)
    p.add_argument("--alpha-factor", type=float, default=1.0)
    p.add_argument("--prune-eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--max-iters", type=_positive_int, default=1000)
    p.add_argument("--batch-size", type=_positive_int, default=None,
                   help="svb only; default ceil(sqrt(T))")
    p.add_argument("--holdout-frac", type=float, default=0.1)
    p.add_argument("--convergence", choices=["elbo", "heldout-nll"], default="elbo",
                   help="vb only; svb always uses the held-out NLL")
    p.add_argument("--max-runtime", type=float, default=None,
                   help="svb only; wall-clock cap in seconds")
    p.add_argument("--nll-check-interval", type=_positive_int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive_int,
                   default=int(os.environ.get("JOINTPMF_THREADS", "1")))
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("eval", help="evaluate a fitted model")
    p.add_argument("--model", required=True)
    p.add_argument("--truth-model", default=None, help="enables exact KLD")
    p.add_argument("--test-data", default=None,
                   help="enables NLL and hide-one RMSE/MAE")
    p.add_argument("--kld-cell-cap", type=int, default=evaluate.DEFAULT_CELL_CAP)
    p.add_argument("--predictions-csv", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("predict", help="predict entries marked '?' in a CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


def cmd_synth(args, argv) -> int:
    started = _now()
    from .model import sample_dataset, sample_model

    if not 0.0 <= args.outage <= 1.0:
        print("error: --outage must lie in [0, 1]", file=sys.stderr)
        return EXIT_USAGE
    if args.samples < 0:
        print("error: --samples must be nonnegative", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.out_dir, exist_ok=True)
    model = sample_model(args.n_vars, args.cards, args.rank, args.seed)
    dataset = sample_dataset(model, args.samples, args.outage, args.seed)
    save_model(model, os.path.join(args.out_dir, "truth_model.json"))
    data_mod.save_dense_csv(dataset, os.path.join(args.out_dir, "data.csv"))
    config = {
        "n_vars": args.n_vars,
        "cards": list(model.cards),
        "rank": args.rank,
        "samples": args.samples,
        "outage": args.outage,
    }
    manifest = _manifest(argv, config, {"seed": args.seed}, [])
    _write_manifest(args.out_dir, manifest, started)
    return EXIT_OK


def _resolve_init_rank(args, dataset: Dataset) -> int:
    if args.init_rank is not None:
        return args.init_rank
    if dataset.num_vars >= 2:
        heuristic = kruskal_max_rank(dataset.num_vars, dataset.cards)
    else:
        heuristic = 1
    return max(1, min(heuristic, args.init_rank_cap))


def cmd_fit(args, argv) -> int:
    started = _now()
    dataset = data_mod.load_dense_csv(args.input)
    init_rank = _resolve_init_rank(args, dataset)
    common = dict(
        init_rank=init_rank,
        alpha_lambda=args.alpha_lambda,
        alpha_factor=args.alpha_factor,
        prune_eps=args.prune_eps,
        elbo_tol=args.tol,
        max_iters=args.max_iters,
        seed=args.seed,
        holdout_fraction=args.holdout_frac,
    )
    if args.algorithm == "vb":
        config = vb.FitConfig(
            convergence=args.convergence.replace("-", "_"), **common
        )
        result = vb.vb_fit(dataset, config)
        trace_name, trace = "elbo", result.elbo_trace
        config_dict = {"algorithm": "vb", **common, "convergence": config.convergence}
    else:
        config = svi.SviConfig(
            convergence="heldout_nll",
            batch_size=args.batch_size,
            max_runtime=args.max_runtime,
            nll_check_interval=args.nll_check_interval,
            **common,
        )
        result = svi.svb_fit(dataset, config)
        trace_name, trace = "nll", result.heldout_nll_trace
        config_dict = {
            "algorithm": "svb",
            **common,
            "batch_size": result.batch_size,
            "nll_check_interval": args.nll_check_interval,
            "max_runtime": args.max_runtime,
        }

    os.makedirs(args.out_dir, exist_ok=True)
    save_model(result.model, os.path.join(args.out_dir, "model.json"))
    manifest = _manifest(argv, config_dict, {"seed": args.seed}, [args.input])
    metrics = result.metrics_dict()
    metrics["manifest"] = manifest
    _write_json(os.path.join(args.out_dir, "metrics.json"), metrics)
    if trace:
        _write_trace_csv(
            os.path.join(args.out_dir, f"{trace_name}_trace.csv"), trace_name, trace
        )
    _write_manifest(args.out_dir, manifest, started)
    return EXIT_OK if result.converged else EXIT_NO_CONVERGENCE


def cmd_eval(args, argv) -> int:
    started = _now()
    if args.truth_model is None and args.test_data is None:
        print("error: eval needs --truth-model and/or --test-data", file=sys.stderr)
        return EXIT_USAGE
    model = load_model(args.model)
    report = evaluate.MetricReport()
    inputs = [args.model]
    predictions_rows = []

    if args.truth_model is not None:
        truth = load_model(args.truth_model)
        inputs.append(args.truth_model)
        report.kld = evaluate.kld_full(truth, model, cell_cap=args.kld_cell_cap)

    if args.test_data is not None:
        test = data_mod.load_dense_csv(args.test_data)
        inputs.append(args.test_data)
        report.mean_nll = evaluate.mean_nll(model, test)
        triples, _skipped = data_mod.hide_one(test, args.seed)
        preds, truths = [], []
        for t, n, true_cat in triples:
            value = evaluate.predict_entry(model, test.y[:, t], n)
            preds.append(value)
            truths.append(true_cat)
            predictions_rows.append((t + 1, n + 1, true_cat, value))
        if preds:
            report.rmse, report.mae = evaluate.rmse_mae(preds, truths)
        report.n_predictions = len(preds)

    os.makedirs(args.out_dir, exist_ok=True)
    manifest = _manifest(argv, {"kld_cell_cap": args.kld_cell_cap}, {"seed": args.seed}, inputs)
    doc = report.to_dict()
    doc["manifest"] = manifest
    _write_json(os.path.join(args.out_dir, "metrics.json"), doc)
    if args.predictions_csv:
        with open(args.predictions_csv, "w", encoding="utf-8") as fh:
            fh.write("sample_id,variable,truth,prediction\n")
            for row in predictions_rows:
                fh.write("%d,%d,%d,%r\n" % row)
    _write_manifest(args.out_dir, manifest, started)
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    model = load_model(args.model)
    n_vars = model.num_vars
    rows = []
    errors = []
    with open(args.input, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split(",")
            if len(fields) != n_vars:
                errors.append(f"line {lineno}: expected {n_vars} fields, found {len(fields)}")
                continue
            marks = [j for j, tok in enumerate(fields) if tok.strip() == "?"]
            if len(marks) != 1:
                errors.append(
                    f"line {lineno}: expected exactly one '?', found {len(marks)}"
                )
                continue
            target = marks[0]
            sample = np.zeros(n_vars, dtype=np.int64)
            ok = True
            for j, tok in enumerate(fields):
                if j == target:
                    continue
                try:
                    v = int(tok)
                except ValueError:
                    errors.append(f"line {lineno}, column {j + 1}: {tok!r} is not an integer")
                    ok = False
                    break
                if not 0 <= v <= model.cards[j]:
                    errors.append(
                        f"line {lineno}, column {j + 1}: value {v} out of range"
                    )
                    ok = False
                    break
                sample[j] = v
            if ok:
                rows.append((lineno, target, sample))
    if errors:
        for msg in errors:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_DATA
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("row,variable,expected_value\n")
        for lineno, target, sample in rows:
            value = evaluate.predict_entry(model, sample, target)
            fh.write(f"{lineno},{target + 1},{value!r}\n")
    return EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "fit": cmd_fit,
        "eval": cmd_eval,
        "predict": cmd_predict,
    }
    try:
        return handlers[args.command](args, argv)
    except (data_mod.ParseError, vb.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
