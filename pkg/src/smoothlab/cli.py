"""Command-line interface: ``smoothlab <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 verification
failure, 3 numerical abort.  Every command writes its resolved settings to
``<out>/config.json`` before doing any work.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, export
from .config import ConfigError, RunConfig, load_config
from .training import NumericalAbort

log = logging.getLogger("smoothlab")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _load_model(path):
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    model, schedule, meta = checkpoint.load_checkpoint(path)
    model.eval()
    return model, schedule


def _cond_id(model, value) -> int:
    if value is None or value == "null":
        return model.null_id
    try:
        cond = int(value)
    except ValueError:
        raise ConfigError(f"--cond must be an integer label or 'null', got {value!r}") from None
    if not 0 <= cond < model.config.num_conditions:
        raise ConfigError(f"--cond {cond} outside 0..{model.config.num_conditions - 1}")
    return cond


def _image_side(model) -> int | None:
    side = int(round(np.sqrt(model.config.data_dim)))
    return side if side * side == model.config.data_dim and side > 1 else None


def _read_input(path, model):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    x, labels = export.read_points(path)
    if x.shape[1] != model.config.data_dim:
        raise ConfigError(f"{path}: samples have dimension {x.shape[1]}, model expects {model.config.data_dim}")
    return torch.tensor(x, dtype=torch.float32), labels


def _command_dir(args) -> Path:
    """Run layout for a non-training command, with its arguments as the config."""
    out = Path(args.out)
    for sub in ("reports", "logs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    settings = {k: v for k, v in vars(args).items() if k != "func"}
    (out / "config.json").write_text(json.dumps(settings, indent=2, sort_keys=True, default=str) + "\n")
    return out


def _run_config_near(ckpt) -> RunConfig:
    """The training config of the run a checkpoint came from, or defaults."""
    cfg = Path(ckpt).resolve().parent.parent / "config.json"
    return load_config(cfg) if cfg.exists() else RunConfig()


# ---------------------------------------------------------------- commands


def cmd_train(args):
    from .pipeline import run_training
    config = load_config(args.config, args.set)
    if args.out:
        config.output_dir = str(args.out)
    _, _, metrics, run_dir = run_training(config)
    print(f"trained {config.train.total_iterations} iterations; final metrics {metrics[-1] if metrics else {}}")
    print(f"checkpoint: {run_dir / 'checkpoints' / 'final'}")


def cmd_sample(args):
    from .sampler import ddim_sample
    out = _command_dir(args)
    model, schedule = _load_model(args.ckpt)
    cond = _cond_id(model, args.cond)
    gen = torch.Generator().manual_seed(args.seed)
    z = torch.randn(args.n, model.config.data_dim, generator=gen, dtype=torch.float64).float()
    with torch.no_grad():
        x, record = ddim_sample(schedule, model, z, model.embed([cond] * args.n), w=args.w, num_steps=args.steps)
    paths = export.write_samples(out / "samples", x.numpy(), _image_side(model))
    record.to_csv(out / "logs" / "trajectory.csv")
    print("wrote " + ", ".join(map(str, paths)))


def cmd_interpolate(args):
    from .evaluation import adjacent_distances
    from .inversion import interpolate_real
    out = _command_dir(args)
    model, schedule = _load_model(args.ckpt)
    (a, _), (b, _) = _read_input(args.a, model), _read_input(args.b, model)
    cond = model.embed([_cond_id(model, args.cond)]).detach()
    outputs = interpolate_real(schedule, model, a[:1], b[:1], cond, args.etas, w=args.w, num_steps=args.steps,
                               inner_iters=args.inner_iters)
    stack = torch.cat(outputs)
    paths = export.write_samples(out / "interpolation", stack.numpy(), _image_side(model))
    dist = adjacent_distances(stack)
    with open(out / "reports" / "distances.csv", "w") as fh:
        fh.write("eta_from,eta_to,distance\n")
        for i, d in enumerate(dist):
            fh.write(f"{args.etas[i]!r},{args.etas[i + 1]!r},{float(d)!r}\n")
    print("wrote " + ", ".join(map(str, paths)) + f"; distance std {float(np.std(dist)):.5g}")


def cmd_invert(args):
    from .inversion import ddim_inversion_result, nti_invert
    out = _command_dir(args)
    model, schedule = _load_model(args.ckpt)
    x, labels = _read_input(args.input, model)
    if args.cond is not None or labels is None:
        ids = [_cond_id(model, args.cond)] * len(x)
    else:
        ids = [int(v) for v in labels]
    cond = model.embed(ids).detach()
    if args.method == "ddim":
        inv = ddim_inversion_result(schedule, model, x, cond, w=args.w, num_steps=args.steps)
    else:
        inv = nti_invert(schedule, model, x, cond, w=args.w, num_steps=args.steps, inner_iters=args.inner_iters,
                         inner_lr=args.inner_lr)
    checkpoint.save_inversion(out / "inversion", inv, {"cond_ids": ids})
    res = inv.residuals.numpy()
    with open(out / "reports" / "residuals.csv", "w") as fh:
        fh.write("step_index," + ",".join(f"sample{i}" for i in range(res.shape[1])) + "\n")
        for i, row in enumerate(res):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"inversion ({args.method}) saved to {out / 'inversion'}; final residual mean {float(res[-1].mean()):.3g}")


def cmd_reconstruct(args):
    from .evaluation import recon_metrics
    from .inversion import reconstruct
    out = _command_dir(args)
    model, schedule = _load_model(args.ckpt)
    inv, meta = checkpoint.load_inversion(args.inversion)
    ids = meta.get("cond_ids") if args.cond is None else [_cond_id(model, args.cond)] * len(inv.x_T)
    x = reconstruct(schedule, model, inv, model.embed(ids).detach())
    export.write_samples(out / "reconstruction", x.numpy(), _image_side(model))
    report = recon_metrics(inv.source.numpy(), x.numpy(), data_range=args.data_range)
    with open(out / "reports" / "recon.csv", "w") as fh:
        fh.write("sample,mse,psnr,ssim\n")
        for row in report.rows():
            fh.write(f"{row['index']},{row['mse']!r},{row['psnr']!r},{row['ssim']!r}\n")
    print(f"MSE {report.mean_mse:.5g}  PSNR {report.mean_psnr:.4g}  SSIM {report.mean_ssim:.4f}")


def cmd_edit(args):
    from .inversion import edit_prompt_switch
    out = _command_dir(args)
    model, schedule = _load_model(args.ckpt)
    inv, meta = checkpoint.load_inversion(args.inversion)
    n = len(inv.x_T)
    src = model.embed(meta.get("cond_ids") if args.cond is None else [_cond_id(model, args.cond)] * n).detach()
    trg = model.embed([_cond_id(model, args.target_cond)] * n).detach()
    x = edit_prompt_switch(schedule, model, inv, src, trg, args.r)
    paths = export.write_samples(out / "edited", x.numpy(), _image_side(model))
    print("wrote " + ", ".join(map(str, paths)))


def cmd_eval_istd(args):
    from .evaluation import compute_istd, paired_report
    from .pipeline import load_dataset
    out = _command_dir(args)
    model, schedule = _load_model(args.ckpt)
    cfg = _run_config_near(args.ckpt).eval
    n = args.conditions or cfg.istd_conditions
    mode = args.cond_mode or cfg.istd_cond
    conds = [model.null_id] * n if mode == "null" else [i % model.config.num_conditions for i in range(n)]
    seed = cfg.istd_seed if args.seed is None else args.seed
    rep = compute_istd(schedule, model, conds, pairs_per_condition=cfg.istd_pairs, seed=seed, w=args.w,
                       num_steps=args.steps)
    with open(out / "reports" / "istd.csv", "w") as fh:
        fh.write("condition_index,condition,std," + ",".join(f"d{i}" for i in range(len(rep.etas) - 1)) + "\n")
        for i, (c, s) in enumerate(zip(rep.conditions, rep.stds)):
            d = rep.distances[i].mean(axis=0)
            fh.write(f"{i},{c},{float(s)!r}," + ",".join(repr(float(v)) for v in d) + "\n")
    print(f"ISTD {rep.istd:.5g} over {n} conditions")
    if args.baseline:
        base, base_schedule = _load_model(args.baseline)
        kwargs = {}
        if args.full:
            run_cfg = _run_config_near(args.ckpt)
            data, _ = load_dataset(run_cfg.dataset)
            held = load_dataset(type(run_cfg.dataset)(**{**vars(run_cfg.dataset), "size": cfg.recon_samples,
                                                         "seed": cfg.recon_seed}))
            kwargs = dict(data=data.numpy(), held_out=held[0].float(), held_out_labels=held[1].tolist(),
                          mmd_samples=min(cfg.mmd_samples, len(data)), nti_w=cfg.nti_w,
                          nti_kwargs={"inner_iters": cfg.nti_inner_iters, "inner_lr": cfg.nti_inner_lr})
        report = paired_report(model, base, schedule, seed, base_schedule=base_schedule, conditions=conds,
                               w=args.w, num_steps=args.steps, **kwargs)
        report.write(out / "reports")
        print(report.table())


def cmd_verify(args):
    from .verify import run_all
    results = run_all()
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smoothlab", description="Step-wise variation regularization lab for small diffusion models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a denoiser into a fresh run directory")
    t.add_argument("config", nargs="?", help="JSON run config (defaults if omitted)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. train.lam=0 (repeatable)")
    t.add_argument("--out", help="run directory (default: output_dir from the config)")
    t.set_defaults(func=cmd_train)

    def common(sp, steps=50, w=1.0):
        sp.add_argument("ckpt", help="checkpoint directory")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--steps", type=int, default=steps, help="DDIM steps")
        sp.add_argument("--w", type=float, default=w, help="guidance scale")
        sp.add_argument("--cond", help="label id or 'null'")

    s = sub.add_parser("sample", help="draw samples with DDIM")
    common(s)
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("interpolate", help="interpolate two real samples through shared-null inversion")
    common(i, w=7.5)
    i.add_argument("--a", required=True, help="CSV with the first sample")
    i.add_argument("--b", required=True, help="CSV with the second sample")
    i.add_argument("--etas", type=float, nargs="+", default=[k / 10 for k in range(11)])
    i.add_argument("--inner-iters", type=int, default=10)
    i.set_defaults(func=cmd_interpolate)

    v = sub.add_parser("invert", help="invert samples to latents (plain DDIM or null-text)")
    common(v, w=7.5)
    v.add_argument("--input", required=True, help="CSV of samples (optional 'label' column)")
    v.add_argument("--method", choices=["ddim", "nti"], default="nti")
    v.add_argument("--inner-iters", type=int, default=10)
    v.add_argument("--inner-lr", type=float, default=1e-2)
    v.set_defaults(func=cmd_invert)

    r = sub.add_parser("reconstruct", help="regenerate samples from a saved inversion")
    r.add_argument("ckpt")
    r.add_argument("--inversion", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--cond", help="override the stored condition ids")
    r.add_argument("--data-range", type=float, default=1.0)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("edit", help="prompt-switch edit of a saved inversion")
    e.add_argument("ckpt")
    e.add_argument("--inversion", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--target-cond", required=True)
    e.add_argument("--r", type=float, default=0.8, help="switch once t <= T * r")
    e.add_argument("--cond", help="override the stored source condition ids")
    e.set_defaults(func=cmd_edit)

    m = sub.add_parser("eval-istd", help="interpolation smoothness, optionally paired against a baseline")
    common(m)
    m.add_argument("--baseline", help="baseline checkpoint for a paired report")
    m.add_argument("--conditions", type=int, help="number of sweeps (default from the run config)")
    m.add_argument("--cond-mode", choices=["null", "labels"])
    m.add_argument("--seed", type=int)
    m.add_argument("--full", action="store_true", help="add MMD and reconstruction rows to the paired report")
    m.set_defaults(func=cmd_eval_istd)

    f = sub.add_parser("verify", help="run the oracle and gradient-check suite")
    f.set_defaults(func=cmd_verify)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
