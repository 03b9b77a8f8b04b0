"""Batch command-line front end.

Verbs: degrade, train-domain, generate-lr, train-sr, infer, evaluate, solve.
Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every successful
run writes a resolved-config echo next to its output so the exact run can be
reproduced.  `SRRES_SEED` provides a global seed fallback.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evaluation, imaging, networks, training, variational
from .losses import LossWeights
from .training import TrainConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage errors to 1
        raise UsageError(message)


_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig) if f.name != "weights"}
_CONFIG_TYPES.update({f.name: f.type for f in fields(LossWeights)})
_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}


def _parse_value(key: str, raw: str):
    if key not in _CONFIG_TYPES:
        raise UsageError(f"unknown config key {key!r}")
    typ = _TYPE_NAMES.get(_CONFIG_TYPES[key], str)
    raw = raw.strip()
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise UsageError(f"config key {key!r} expects a {typ.__name__}, got {raw!r}") from None


def resolve_config(stage: str, config_file=None, overrides=(), env_seed=None) -> TrainConfig:
    """Stage defaults <- config file <- CLI overrides, in that precedence."""
    values: dict = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            values[key.strip()] = _parse_value(key.strip(), raw)
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values[key.strip()] = _parse_value(key.strip(), raw)
    if values.get("stage", stage) != stage:
        raise UsageError(f"config stage {values['stage']!r} conflicts with the {stage!r} verb")
    values.pop("stage", None)
    if "seed" not in values and env_seed is not None:
        values["seed"] = int(env_seed)
    w_fields = {f.name for f in fields(LossWeights)}
    w_over = {k: values.pop(k) for k in list(values) if k in w_fields}
    factory = TrainConfig.domain_defaults if stage == "domain" else TrainConfig.sr_defaults
    cfg = factory(**values)
    if w_over:
        cfg.weights = LossWeights(**{**vars(cfg.weights), **w_over})
    return cfg


def _echo_config(verb: str, settings: dict, target: Path):
    lines = [f"verb={verb}"] + [f"{k}={settings[k]}" for k in sorted(settings)]
    target.write_text("\n".join(lines) + "\n")


def _echo_path_for(out) -> Path:
    out = Path(out)
    if out.suffix:
        return out.with_name(out.name + ".run-config.txt")
    out.mkdir(parents=True, exist_ok=True)
    return out / "run-config.txt"


def _env_seed():
    raw = os.environ.get("SRRES_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"SRRES_SEED must be an integer, got {raw!r}") from None


def _seed_or_default(args_seed):
    if args_seed is not None:
        return args_seed
    env = _env_seed()
    return 0 if env is None else env


def _log(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# Verb implementations
# ---------------------------------------------------------------------------

def _cmd_degrade(args) -> int:
    seed = _seed_or_default(args.seed)
    files = imaging.list_pngs(args.in_dir)
    if not files:
        raise ValueError(f"no PNG files under {args.in_dir}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, path in enumerate(files):
        img = imaging.load_png(path)
        spec = imaging.DegradationSpec(scale=args.scale, noise_sigma=args.sigma / 255.0, seed=seed + i)
        imaging.save_png(imaging.degrade(img, spec), out / path.name)
    _echo_config(
        "degrade",
        {"in": args.in_dir, "out": args.out_dir, "scale": args.scale, "sigma": args.sigma, "seed": seed},
        _echo_path_for(out),
    )
    _log(f"degraded {len(files)} images at scale {args.scale}, sigma {args.sigma}/255")
    return 0


def _cmd_train_domain(args) -> int:
    cfg = resolve_config("domain", args.config, args.set, _env_seed())
    source = [imaging.load_png(p) for p in imaging.list_pngs(args.source)]
    target = [imaging.load_png(p) for p in imaging.list_pngs(args.target)]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = training.config_to_dict(cfg)
    settings.update({"source": args.source, "target": args.target})
    _echo_config("train-domain", settings, out / "run-config.txt")
    ck = training.train_domain(cfg, source, target, out_dir=out)
    training.save_checkpoint(ck, out / "domain-final.pkl")
    _log(f"domain training finished after {ck.progress} epochs -> {out / 'domain-final.pkl'}")
    return 0


def _cmd_generate_lr(args) -> int:
    ck = training.load_checkpoint(args.ckpt)
    hr_images = [imaging.load_png(p) for p in imaging.list_pngs(args.hr)]
    names = [p.name for p in imaging.list_pngs(args.hr)]
    pairs = training.generate_lr_dataset(ck, hr_images, args.scale)
    out = Path(args.out_dir)
    (out / "hr").mkdir(parents=True, exist_ok=True)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    for name, pair in zip(names, pairs):
        imaging.save_png(pair.hr, out / "hr" / name)
        imaging.save_png(pair.lr, out / "lr" / name)
    _echo_config(
        "generate-lr",
        {"ckpt": args.ckpt, "hr": args.hr, "out": args.out_dir, "scale": args.scale},
        _echo_path_for(out),
    )
    _log(f"wrote {len(pairs)} generated pairs under {out}")
    return 0


def _cmd_train_sr(args) -> int:
    cfg = resolve_config("sr", args.config, args.set, _env_seed())
    pairs = imaging.load_pair_dataset(args.pairs)
    resume = training.load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = training.config_to_dict(cfg)
    settings.update({"pairs": args.pairs})
    _echo_config("train-sr", settings, out / "run-config.txt")
    ck = training.train_sr(cfg, pairs, out_dir=out, resume_from=resume)
    training.save_checkpoint(ck, out / "sr-final.pkl")
    _log(f"sr training finished after {ck.progress} iterations -> {out / 'sr-final.pkl'}")
    return 0


def _sr_model_fn(ck, sigma_override=None):
    model = training.load_sr_generator(ck)

    def model_fn(lr_img):
        sigma = sigma_override if sigma_override is not None else imaging.estimate_noise_sigma(lr_img)
        return networks.gsr_forward(model, lr_img, sigma)

    return model_fn


def _cmd_infer(args) -> int:
    ck = training.load_checkpoint(args.ckpt)
    if args.scale is not None and ck.config.get("scale") != args.scale:
        raise ValueError(f"checkpoint scale {ck.config.get('scale')} != requested {args.scale}")
    lr = imaging.load_png(args.in_file)
    sigma = None if args.sigma is None else args.sigma / 255.0
    model_fn = _sr_model_fn(ck, sigma)
    sr = evaluation.self_ensemble(model_fn, lr) if args.ensemble else model_fn(lr)
    imaging.save_png(sr, args.out_file)
    _echo_config(
        "infer",
        {"ckpt": args.ckpt, "in": args.in_file, "out": args.out_file,
         "ensemble": args.ensemble, "sigma": args.sigma, "scale": ck.config.get("scale")},
        _echo_path_for(args.out_file),
    )
    _log(f"super-resolved {args.in_file} -> {args.out_file}")
    return 0


def _cmd_evaluate(args) -> int:
    ck = training.load_checkpoint(args.ckpt)
    pairs = imaging.load_pair_dataset(args.in_dir)
    ids = imaging.matched_pair_names(args.in_dir)
    model_fn = _sr_model_fn(ck)
    report = evaluation.evaluate_pairs(
        model_fn, pairs, ensemble=args.ensemble, ids=ids,
        csv_path=args.out_file, json_path=args.json,
    )
    _echo_config(
        "evaluate",
        {"ckpt": args.ckpt, "in": args.in_dir, "out": args.out_file,
         "ensemble": args.ensemble, "json": args.json},
        _echo_path_for(args.out_file),
    )
    agg = report.aggregate
    _log(f"evaluated {len(report.rows)} pairs: psnr={agg['psnr']:.3f} ssim={agg['ssim']:.4f} lpips={agg['lpips']:.4f}")
    return 0


def _cmd_solve(args) -> int:
    y = imaging.load_png(args.in_file)
    bank = variational.FilterBank.derivative_bank(channels=y.shape[0])
    model = variational.EnergyModel(
        scale=args.scale, lam=args.lam, bank=bank,
        slopes=np.full(bank.num_filters, args.slope),
    )
    hr_shape = (y.shape[0], y.shape[1] * args.scale, y.shape[2] * args.scale)
    lipschitz = variational.lipschitz_estimate(model, hr_shape, iters=args.power_iters)
    model.step = 1.0 / lipschitz
    epsilon = args.epsilon if args.epsilon is not None else 2.0 * float(np.sqrt(np.prod(hr_shape)))
    result = variational.pgm_solve(
        model, y, variational.BallConstraint(epsilon),
        max_iters=args.iters, tol=args.tol, trace_path=args.trace,
    )
    imaging.save_png(networks.clip_intensities(result.image), args.out_file)
    _echo_config(
        "solve",
        {"in": args.in_file, "out": args.out_file, "scale": args.scale, "lam": args.lam,
         "slope": args.slope, "iters": args.iters, "tol": args.tol, "epsilon": epsilon,
         "power_iters": args.power_iters},
        _echo_path_for(args.out_file),
    )
    _log(f"solver stopped after {result.iterations} iterations, final energy {result.energies[-1]:.6g}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="srres", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("degrade", help="bicubic downscale + noise over a directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--sigma", type=float, default=0.0, help="noise std in 8-bit units")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("train-domain", help="learn source-domain corruptions")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=_cmd_train_domain)

    p = sub.add_parser("generate-lr", help="emit corrupted LR pairs from a domain checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--hr", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.set_defaults(func=_cmd_generate_lr)

    p = sub.add_parser("train-sr", help="train the SR generator on hr/lr pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", dest="out_dir", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=_cmd_train_sr)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_file", required=True)
    p.add_argument("--out", dest="out_file", required=True)
    p.add_argument("--scale", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None, help="noise std in 8-bit units (else estimated)")
    p.add_argument("--ensemble", action="store_true")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="metric report over an hr/lr directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", dest="out_file", required=True)
    p.add_argument("--json", default=None)
    p.add_argument("--ensemble", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("solve", help="classical proximal-gradient restoration")
    p.add_argument("--in", dest="in_file", required=True)
    p.add_argument("--out", dest="out_file", required=True)
    p.add_argument("--scale", type=int, default=1)
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--slope", type=float, default=0.25)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--power-iters", type=int, default=20)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=_cmd_solve)

    return parser


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
