"""``panflow`` command line: synth, train, sample, eval, verify, ablate.

Exit codes: 0 success, 2 usage error, 3 numeric failure, 4 verification failure.
"""
import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_triples, read_manifest, synth_triples, write_dataset
from .errors import FormatError, NumericOverflowError, PanFlowError
from .experiments import (ABLATION_COLUMNS, ABLATIONS, evaluate, model_config_for, run_ablation,
                          sample_candidates)
from .flow import ModelConfig, PanFlowModel, select_index
from .raster import read_raster, write_raster
from .train import (TrainConfig, coerce_fields, evaluate_bpd, parse_kv, train, write_loss_csv)
from .verify import LEVELS, check_checkpoint_file, run_checks

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
MODEL_PREFIX = "model."

log = logging.getLogger("panflow")


class UsageError(Exception):
    pass


def _print_resolved(command, config, seed):
    print(f"panflow {command} config: {json.dumps(config, sort_keys=True, default=str)}")
    print(f"panflow {command} seed: {seed}")
    sys.stdout.flush()


def load_run_config(path):
    """Split a key=value file into TrainConfig and ``model.``-prefixed ModelConfig fields."""
    with open(path, encoding="utf-8") as fh:
        raw = parse_kv(fh.read())
    train_raw = {k: v for k, v in raw.items() if not k.startswith(MODEL_PREFIX)}
    model_raw = {k[len(MODEL_PREFIX):]: v for k, v in raw.items() if k.startswith(MODEL_PREFIX)}
    model_kw = coerce_fields(ModelConfig, model_raw)
    return TrainConfig(**coerce_fields(TrainConfig, train_raw)), model_kw


# --- subcommands --------------------------------------------------------------

def cmd_synth(args):
    _print_resolved("synth", {"out": args.out, "count": args.count, "bands": args.bands,
                              "size": args.size, "scale": args.scale, "split": args.split}, args.seed)
    if args.count < 0 or args.size < 1:
        raise UsageError("--count must be >= 0 and --size >= 1")
    triples = synth_triples(args.count, bands=args.bands, size=args.size, seed=args.seed, scale=args.scale)
    path = write_dataset(args.out, triples, split=args.split, seed=args.seed)
    print(f"wrote {len(triples)} triples and {path}")
    return EXIT_OK


def cmd_train(args):
    train_cfg, model_kw = load_run_config(args.config)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    triples = load_triples(args.data)
    if not triples:
        raise UsageError(f"{args.data} lists no triples")
    if any(t.H is None for t in triples):
        raise UsageError("training needs ground-truth HRMS for every triple")
    dtype = np.dtype(train_cfg.dtype)
    if args.resume:
        model = load_checkpoint(args.resume, dtype=dtype)
        conflicting = {k: v for k, v in model_kw.items() if getattr(model.config, k) != v}
        if conflicting:
            raise UsageError(f"config keys {sorted(conflicting)} disagree with checkpoint {args.resume}")
    else:
        model = PanFlowModel(model_config_for(triples, **model_kw), seed=train_cfg.seed, dtype=dtype)
    _print_resolved("train", {"train": asdict(train_cfg), "model": model.config.to_dict(),
                              "data": args.data, "count": len(triples), "resume": args.resume},
                    train_cfg.seed)

    loss_csv = args.loss_csv or os.path.splitext(args.out)[0] + ".loss.csv"
    write_loss_csv([], loss_csv)

    def on_epoch(report):
        write_loss_csv([report], loss_csv, append=True)
        print(f"epoch {report.epoch}: nll_bpd={report.mean_nll_bits_per_dim:.6g} "
              f"l1={report.mean_l1:.6g} lr={report.lr:.3g} ({report.wall_time:.1f}s)", flush=True)

    bpd0 = evaluate_bpd(model, triples)
    print(f"initial bits-per-dim {bpd0:.6f}", flush=True)
    train(model, triples, train_cfg, on_epoch=on_epoch, checkpoint_path=args.out)
    save_checkpoint(model, args.out)
    print(f"final bits-per-dim {evaluate_bpd(model, triples):.6f}")
    print(f"wrote {args.out} and {loss_csv}")
    return EXIT_OK


def _check_model_geometry(model, L, P):
    cfg = model.config
    if L.ndim != 3 or L.shape[2] != cfg.bands:
        raise UsageError(f"LRMS {L.shape} does not have the checkpoint's {cfg.bands} bands")
    if P.ndim != 3 or P.shape[2] != 1 or P.shape[:2] != (L.shape[0] * cfg.scale, L.shape[1] * cfg.scale):
        raise UsageError(f"PAN {P.shape} does not match LRMS {L.shape} at checkpoint scale {cfg.scale}")


def cmd_sample(args):
    model = load_checkpoint(args.model)
    num = 1 if args.tau == 0 else args.num
    _print_resolved("sample", {"model": args.model, "model_config": model.config.to_dict(), "num": num,
                               "tau": args.tau, "select": args.select, "out": args.out}, args.seed)
    if args.num < 1:
        raise UsageError("--num must be >= 1")
    if args.tau < 0:
        raise UsageError("--tau must be >= 0")
    if (args.data is None) == (args.lrms is None or args.pan is None):
        raise UsageError("give either --lrms and --pan, or --data")
    os.makedirs(args.out, exist_ok=True)

    if args.data is None:
        L, P = read_raster(args.lrms), read_raster(args.pan)
        _check_model_geometry(model, L, P)
        cands, logps, seeds = sample_candidates(model, L, P, num, args.tau, args.seed)
        idx = select_index(logps)
        if num > 1:
            for i, c in enumerate(cands):
                write_raster(c, os.path.join(args.out, f"candidate_{i:03d}.pfnr"))
        write_raster(cands[idx], os.path.join(args.out, "selected.pfnr"))
        with open(os.path.join(args.out, "logprobs.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "seed", "log_prob", "selected"])
            for i, (lp, s) in enumerate(zip(logps, seeds)):
                w.writerow([i, s, repr(lp), int(i == idx)])
        print(f"selected candidate {idx} (log_prob {logps[idx]:.6f})")
        return EXIT_OK

    triples = load_triples(args.data)
    with open(os.path.join(args.out, "logprobs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "index", "seed", "log_prob", "selected"])
        for t in triples:
            _check_model_geometry(model, t.L, t.P)
            cands, logps, seeds = sample_candidates(model, t.L, t.P, num, args.tau, args.seed)
            idx = select_index(logps)
            write_raster(cands[idx], os.path.join(args.out, f"{t.id}.pfnr"))
            for i, (lp, s) in enumerate(zip(logps, seeds)):
                w.writerow([t.id, i, s, repr(lp), int(i == idx)])
    print(f"wrote {len(triples)} selected outputs to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    _print_resolved("eval", {"pred": args.pred, "ref": args.ref, "full_res": args.full_res, "out": args.out},
                    None)
    manifest = read_manifest(args.ref)
    pred_ids = sorted(f[:-5] for f in os.listdir(args.pred) if f.endswith(".pfnr"))
    missing = sorted(set(manifest.ids) - set(pred_ids))
    extra = sorted(set(pred_ids) - set(manifest.ids))
    if missing or extra:
        raise UsageError(f"prediction ids do not match {args.ref}: missing {missing[:5]}, unexpected {extra[:5]}")
    triples = load_triples(manifest)
    if not args.full_res and any(t.H is None for t in triples):
        raise UsageError("reference metrics need HRMS paths; use --full-res for no-reference evaluation")
    preds = [read_raster(os.path.join(args.pred, f"{t.id}.pfnr")) for t in triples]
    for p, t in zip(preds, triples):
        if p.shape[:2] != t.P.shape[:2] or p.shape[2] != t.L.shape[2]:
            raise UsageError(f"prediction {t.id} has shape {p.shape}, expected {t.P.shape[:2] + t.L.shape[2:]}")
    report = evaluate(preds, triples, full_res=args.full_res)
    report.to_csv(args.out)
    agg = report.aggregate()
    print("MEAN " + " ".join(f"{k}={v:.6g}" for k, v in agg.items()))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_verify(args):
    _print_resolved("verify", {"level": args.level, "model": args.model}, 0)
    results = run_checks(args.level, on_result=lambda r: print(r.line(), flush=True))
    if args.model:
        res = check_checkpoint_file(args.model)
        print(res.line())
        results.append(res)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED checks: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_ablate(args):
    train_cfg, model_kw = load_run_config(args.config)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    train_triples = load_triples(args.data)
    test_triples = load_triples(args.test) if args.test else train_triples
    if not train_triples or not test_triples:
        raise UsageError("ablation needs non-empty train and test manifests")
    try:
        ks = tuple(int(k) for k in args.ks.split(","))
    except ValueError as exc:
        raise UsageError(f"--ks must be comma-separated integers: {exc}") from exc
    base = model_config_for(train_triples, **model_kw)
    _print_resolved("ablate", {"what": args.what, "train": asdict(train_cfg), "model": base.to_dict(),
                               "ks": ks, "data": args.data, "test": args.test}, train_cfg.seed)
    rows = run_ablation(args.what, train_triples, test_triples, base, train_cfg, ks)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
            print("  ".join(f"{k}={row[k]}" for k in ABLATION_COLUMNS), flush=True)
    print(f"wrote {args.out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="panflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic reduced-resolution triples and a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--bands", type=int, default=4)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="L1 pretraining then NLL training")
    s.add_argument("--data", required=True, help="training manifest")
    s.add_argument("--config", required=True, help="key=value training config")
    s.add_argument("--out", required=True, help="checkpoint path (.pfnm)")
    s.add_argument("--loss-csv", help="loss log (default: <out>.loss.csv)")
    s.add_argument("--resume", help="start from this checkpoint")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw candidates and pick the most probable")
    s.add_argument("--model", required=True)
    s.add_argument("--lrms")
    s.add_argument("--pan")
    s.add_argument("--data", help="manifest; writes one selected output per id")
    s.add_argument("--num", type=int, default=1)
    s.add_argument("--tau", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--select", choices=["max-prob"], default="max-prob")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="metric CSV for predictions against a manifest")
    s.add_argument("--pred", required=True, help="directory of <id>.pfnr predictions")
    s.add_argument("--ref", required=True, help="manifest")
    s.add_argument("--full-res", action="store_true", help="add no-reference D_lambda, D_s, QNR")
    s.add_argument("--out", default="metrics.csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="run the self-check suite")
    s.add_argument("--level", choices=LEVELS, default="fast")
    s.add_argument("--model", help="also check the integrity of this checkpoint")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("ablate", help="train model variants under one budget and compare")
    s.add_argument("--what", choices=ABLATIONS, required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--test", help="evaluation manifest (default: --data)")
    s.add_argument("--config", required=True)
    s.add_argument("--ks", default="1,2,3,4")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="ablation.csv")
    s.set_defaults(func=cmd_ablate)
    return p


def _thread_limit():
    raw = os.environ.get("PANFLOW_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"PANFLOW_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except NumericOverflowError as exc:
        print(f"panflow: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, PanFlowError, OSError, FormatError) as exc:
        print(f"panflow: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
