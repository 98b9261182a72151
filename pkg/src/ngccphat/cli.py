"""Batch command-line front end.

Subcommands: simulate, train, eval, extract, gradcheck. All experiments are
driven by a JSON config with a mandatory seed; every command echoes the
resolved config into its output directory before doing work.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 incompatibility.
"""

import argparse
import json
import os
import sys

import numpy as np

from ngccphat import backend
from ngccphat.autodiff import NonFiniteError, grad_check
from ngccphat.evaluate import (
    decode_tracks,
    detail_csv_rows,
    gcc_baseline,
    score,
)
from ngccphat.model import (
    ModelConfig,
    NgccPhatModel,
    posterior_csv_rows,
    write_feature_file,
)
from ngccphat.pit import (
    TrainConfig,
    labels_to_pair_list,
    pit_loss,
    pit_loss_grad_logits,
    train_epoch,
)
from ngccphat.scene import DatasetSpec, load_dataset, save_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_INCOMPATIBLE = 4


class ConfigError(Exception):
    pass


class IncompatibleError(Exception):
    pass


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if "seed" not in raw:
        raise ConfigError("config field 'seed' is mandatory")
    if "out_dir" not in raw:
        raise ConfigError("config field 'out_dir' is mandatory")
    try:
        resolved = {
            "seed": int(raw["seed"]),
            "out_dir": raw["out_dir"],
            "dataset": DatasetSpec.from_dict(raw.get("dataset", {})),
            "model": ModelConfig.from_dict(raw.get("model", {})),
            "training": TrainConfig.from_dict(raw.get("training", {})),
            "eval": {
                "tolerance": 1,
                "k_peaks": 2,
                "threshold": 0.3,
                **raw.get("eval", {}),
            },
        }
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}")
    return resolved


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    resolved = {
        "seed": cfg["seed"],
        "out_dir": cfg["out_dir"],
        "dataset": cfg["dataset"].to_dict(),
        "model": cfg["model"].to_dict(),
        "training": cfg["training"].to_dict(),
        "eval": cfg["eval"],
        "kernel_backend": backend.BACKEND,
    }
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)


def check_compat(model, manifest, force):
    mc = model.config
    problems = []
    if manifest["channels"] != mc.num_mics:
        problems.append("channel count")
    if manifest["window"] != mc.window:
        problems.append("window length")
    if manifest["tau_max"] != mc.tau_max:
        problems.append("tau_max")
    trained_hash = model.meta.get("geometry_hash")
    if trained_hash is not None and trained_hash != manifest["geometry_hash"]:
        problems.append("geometry hash")
    if problems and not force:
        raise IncompatibleError(
            "checkpoint/dataset mismatch: " + ", ".join(problems)
            + " (use --force to override)"
        )


def cmd_simulate(args):
    cfg = load_config(args.config)
    out_dir = args.out or os.path.join(cfg["out_dir"], "dataset")
    echo_config(cfg, out_dir)
    manifest = save_dataset(cfg["dataset"], cfg["seed"], out_dir, threads=args.threads)
    print(f"wrote {manifest['n_frames']} frames to {out_dir}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    out_dir = args.out or os.path.join(cfg["out_dir"], "train")
    data_dir = args.data or os.path.join(cfg["out_dir"], "dataset")
    if not os.path.exists(os.path.join(data_dir, "manifest.json")):
        raise ConfigError(f"dataset not found at {data_dir}")
    echo_config(cfg, out_dir)
    manifest, records = load_dataset(data_dir)
    model = NgccPhatModel(cfg["model"], seed=cfg["seed"])
    check_compat(model, manifest, force=args.force)
    model.meta["geometry_hash"] = manifest["geometry_hash"]

    if args.grad_check:
        report = _model_grad_check(model, records, cfg)
        if report["max_rel_err"] > 1e-4:
            print(
                f"grad check FAILED: {report['worst']}", file=sys.stderr
            )
            return EXIT_NUMERIC
        print(f"grad check passed, max rel err {report['max_rel_err']:.2e}")

    stats = train_epoch(model, records, cfg["training"], seed=cfg["seed"])
    ckpt = os.path.join(out_dir, "checkpoint.ngcp")
    model.save_checkpoint(ckpt)
    with open(os.path.join(out_dir, "train_log.jsonl"), "w") as fh:
        fh.write("\n".join(stats.log_lines()) + "\n")
    summary = {
        "frames_used": stats.frames_used,
        "frames_discarded": stats.frames_discarded,
        "initial_loss": stats.initial_loss,
        "final_loss": stats.final_loss,
        "steps": model.step_count,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _model_grad_check(model, records, cfg, n_probe=10):
    rec = next(r for r in records if r.polyphony > 0)
    pairs = model.config.pairs()
    labels = labels_to_pair_list(rec.labels, pairs)
    labels = [row[: model.config.tracks] for row in labels]
    p_eff = min(rec.polyphony, model.config.tracks)

    def loss_fn():
        model.zero_grad()
        out = model.forward(rec.audio)
        report = pit_loss(out.posterior, labels, p_eff)
        grad = pit_loss_grad_logits(out.posterior, labels, report)
        model.backward(grad, out.cache)
        return report.total

    params = model.parameters()
    # the sinc cutoffs sit on sharply curved PHAT-normalized terms, so they
    # need a much finer probe step before the quadratic truncation error of
    # central differences drops below the acceptance tolerance
    cutoff = [p for p in params if p[0].endswith("_raw")]
    other = [p for p in params if not p[0].endswith("_raw")]
    rng = np.random.default_rng(cfg["seed"])
    r_cut = grad_check(loss_fn, cutoff, n_probe=n_probe, step=1e-8, rng=rng)
    r_oth = grad_check(loss_fn, other, n_probe=n_probe, rng=rng)
    worst = max((r_cut["worst"], r_oth["worst"]), key=lambda w: w["rel_err"])
    return {
        "per_param": {**r_cut["per_param"], **r_oth["per_param"]},
        "max_rel_err": worst["rel_err"],
        "worst": worst,
    }


def _evaluate(model, records, eval_cfg):
    pairs = model.config.pairs()
    tau_max = model.config.tau_max
    posteriors, labels_stream, frames = [], [], []
    for rec in records:
        out = model.forward(rec.audio)
        posteriors.append(out.posterior)
        labels_stream.append(labels_to_pair_list(rec.labels, pairs))
        frames.append(rec.audio)

    tol = eval_cfg["tolerance"]
    oracle_preds = [
        decode_tracks(post, P_hint=max(rec.polyphony, 1))
        for post, rec in zip(posteriors, records)
    ]
    card_oracle, detail_oracle = score(oracle_preds, labels_stream, tolerance=tol)
    thresh_preds = [
        decode_tracks(post, threshold=eval_cfg["threshold"]) for post in posteriors
    ]
    card_thresh, _ = score(thresh_preds, labels_stream, tolerance=tol)
    card_base, detail_base = gcc_baseline(
        frames, labels_stream, pairs, tau_max, eval_cfg["k_peaks"], tolerance=tol
    )
    return {
        "posteriors": posteriors,
        "model_oracle": (card_oracle, detail_oracle),
        "model_threshold": card_thresh,
        "baseline": (card_base, detail_base),
    }


def cmd_eval(args):
    cfg = load_config(args.config)
    out_dir = args.out or os.path.join(cfg["out_dir"], "eval")
    data_dir = args.data or os.path.join(cfg["out_dir"], "dataset")
    ckpt = args.checkpoint or os.path.join(cfg["out_dir"], "train", "checkpoint.ngcp")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    if not os.path.exists(os.path.join(data_dir, "manifest.json")):
        raise ConfigError(f"dataset not found at {data_dir}")
    echo_config(cfg, out_dir)
    model, _ = NgccPhatModel.load_checkpoint(ckpt)
    manifest, records = load_dataset(data_dir)
    check_compat(model, manifest, force=args.force)

    results = _evaluate(model, records, cfg["eval"])
    card_oracle, detail_oracle = results["model_oracle"]
    card_base, detail_base = results["baseline"]
    outputs = {
        "model_scorecard.json": card_oracle.to_json(),
        "model_scorecard_threshold.json": results["model_threshold"].to_json(),
        "baseline_scorecard.json": card_base.to_json(),
        "model_detail.csv": "\n".join(detail_csv_rows(detail_oracle)),
        "baseline_detail.csv": "\n".join(detail_csv_rows(detail_base)),
    }
    if args.dump_posteriors:
        rows = posterior_csv_rows(results["posteriors"][: args.dump_posteriors])
        outputs["posteriors.csv"] = "\n".join(rows)
    for name, text in outputs.items():
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text + "\n")
    print("model:", card_oracle.to_json())
    print("baseline:", card_base.to_json())
    return EXIT_OK


def cmd_extract(args):
    cfg = load_config(args.config)
    out_dir = args.out or os.path.join(cfg["out_dir"], "features")
    ckpt = args.checkpoint or os.path.join(cfg["out_dir"], "train", "checkpoint.ngcp")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint not found: {ckpt}")
    if not os.path.exists(args.signal):
        raise ConfigError(f"signal file not found: {args.signal}")
    echo_config(cfg, out_dir)
    model, _ = NgccPhatModel.load_checkpoint(ckpt)
    mc = model.config
    raw = np.fromfile(args.signal, dtype="<f4")
    if raw.size % mc.num_mics:
        raise ConfigError(
            f"signal length {raw.size} not divisible by {mc.num_mics} channels"
        )
    signal = raw.reshape(mc.num_mics, -1).astype(np.float64)
    features = model.extract_features(signal)
    dest = os.path.join(
        out_dir, os.path.splitext(os.path.basename(args.signal))[0] + ".ngcf"
    )
    write_feature_file(dest, features, mc)
    print(f"wrote {len(features)} feature frames to {dest}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    out_dir = os.path.join(cfg["out_dir"], "gradcheck")
    echo_config(cfg, out_dir)
    spec = cfg["dataset"]
    from ngccphat.scene import generate_frame

    model = NgccPhatModel(cfg["model"], seed=cfg["seed"])
    rec = generate_frame(spec, np.random.SeedSequence(cfg["seed"]))
    if rec.polyphony == 0:
        rec = generate_frame(spec, np.random.SeedSequence(cfg["seed"] + 1))
    report = _model_grad_check(model, [rec], cfg)
    print(json.dumps(
        {"max_rel_err": report["max_rel_err"], "worst": report["worst"]},
        sort_keys=True, default=str,
    ))
    if report["max_rel_err"] > 1e-4:
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ngccphat",
        description="Multi-source TDOA estimation experiments",
    )
    parser.add_argument(
        "--threads", type=int, default=os.cpu_count() or 1,
        help="worker processes for data generation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a labeled synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the correlation network")
    p.add_argument("--config", required=True)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--grad-check", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score model and baseline on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--dump-posteriors", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract", help="extract TDOA features from audio")
    p.add_argument("--config", required=True)
    p.add_argument("--signal", required=True,
                   help="raw float32 LE interleaved-by-channel file")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleError as exc:
        print(f"incompatible inputs: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
