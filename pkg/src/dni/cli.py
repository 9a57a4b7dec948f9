"""Command line interface: ``dni <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import warnings

from . import analysis, harness
from . import checkpoint as ckpt
from .imaging import load_image, load_manifest, psnr
from .interpolator import InterpolationRecipe, interp2, interpN
from .netgraph import build_arch, fold_bn, spec_of
from .trainer import TrainConfig, finetune, train


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _sigma(text: str):
    vals = _floats(text)
    return vals[0] if len(vals) == 1 else tuple(vals)


def _fmt_psnr(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


def cmd_train(args) -> int:
    spec = build_arch(args.arch, args.width)
    cfg = TrainConfig(iterations=args.iters, batch_size=args.batch, patch_size=args.patch,
                      learning_rate=args.lr, optimizer=args.optimizer, seed=args.seed,
                      noise_sigma=_sigma(args.sigma), checkpoint_every=args.checkpoint_every)
    model = train(spec, cfg, load_manifest(args.data), log_path=args.log,
                  checkpoint_dir=args.checkpoint_dir)
    print(ckpt.save(model, args.out))
    return 0


def cmd_finetune(args) -> int:
    base = ckpt.load(getattr(args, "from"))
    prev = base.meta.get("train", {})
    cfg = TrainConfig(iterations=args.iters, batch_size=args.batch or prev.get("batch_size", 16),
                      patch_size=args.patch or prev.get("patch_size", 40),
                      learning_rate=args.lr or prev.get("learning_rate", 1e-3),
                      optimizer=prev.get("optimizer", "adam"), seed=args.seed,
                      noise_sigma=_sigma(args.sigma), checkpoint_every=args.checkpoint_every)
    model = finetune(base, cfg, load_manifest(args.data), log_path=args.log,
                     checkpoint_dir=args.checkpoint_dir)
    print(ckpt.save(model, args.out))
    return 0


def cmd_interp(args) -> int:
    models = [ckpt.load(p) for p in args.models.split(",")]
    alphas = _floats(args.alphas)
    if len(models) != len(alphas):
        raise SystemExit(f"{len(models)} models but {len(alphas)} alphas")
    if len(models) == 2 and abs(sum(alphas) - 1.0) <= 1e-6:
        out = interp2(models[0], models[1], alphas[0])
    else:
        out = interpN(InterpolationRecipe(list(zip(models, alphas))))
    print(ckpt.save(out, args.out))
    return 0


def cmd_sweep(args) -> int:
    a, b = ckpt.load(args.a), ckpt.load(args.b)
    result = harness.sweep_levels(a, b, args.step, args.test, _floats(args.sigma), seed=args.test_seed)
    with open(args.out, "w") as fh:
        json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
    for s, (alpha, score) in result.best.items():
        print(f"sigma={s:g} best alpha={alpha:g} psnr={score:.4f}")
    return 0


def cmd_correlate(args) -> int:
    ref = ckpt.load(args.ref)
    reports = []
    for path in args.models.split(","):
        rep = analysis.model_corr(ckpt.load(path), ref, args.layer, mode=args.mode, label=path)
        reports.append(rep)
        print(f"{path}: median={rep.median:.4f} q10={rep.quantiles['q10']:.4f} q90={rep.quantiles['q90']:.4f}")
    analysis.reports_to_json(reports, args.out)
    if args.csv:
        analysis.write_curve_csv([(r.label, r) for r in reports], args.csv)
    return 0


def cmd_denoise(args) -> int:
    model = ckpt.load(args.model)
    model_b = ckpt.load(args.model_b) if args.model_b else None
    value = harness.denoise(model, args.input, args.out, args.ref, mask_path=args.mask, model_b=model_b)
    if value is not None:
        print(f"PSNR {_fmt_psnr(value)} dB")
    return 0


def cmd_fold_bn(args) -> int:
    model = ckpt.load(args.input)
    _, folded = fold_bn(spec_of(model), model)
    print(ckpt.save(folded, args.out))
    return 0


def cmd_study(args) -> int:
    if args.kind == "unseen-noise":
        report = harness.run_unseen_noise_study(args.config)
        print(report.table(), end="")
    else:
        out = harness.run_correlation_study(args.config)
        for layer, rows in out["curves"].items():
            meds = " ".join(f"N{r['level']:g}:{r['median']:.3f}" for r in rows)
            print(f"{layer}: {meds} | scratch control {out['scratch_control_median'][layer]:.3f}")
    return 0


def cmd_psnr(args) -> int:
    print(_fmt_psnr(psnr(load_image(args.ref), load_image(args.test))))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dni", description="Deep network interpolation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a denoiser from scratch")
    t.add_argument("--arch", required=True)
    t.add_argument("--width", type=int)
    t.add_argument("--sigma", required=True, help="noise level, or comma list for mixed training")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--iters", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--patch", type=int, default=40)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    t.add_argument("--log")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--checkpoint-dir")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint to another noise level")
    f.add_argument("--from", required=True)
    f.add_argument("--sigma", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--iters", type=int, required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--batch", type=int)
    f.add_argument("--patch", type=int)
    f.add_argument("--lr", type=float, help="base learning rate (scaled by 0.1 for fine-tuning)")
    f.add_argument("--log")
    f.add_argument("--checkpoint-every", type=int, default=0)
    f.add_argument("--checkpoint-dir")
    f.set_defaults(func=cmd_finetune)

    i = sub.add_parser("interp", help="interpolate checkpoints")
    i.add_argument("--models", required=True)
    i.add_argument("--alphas", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_interp)

    s = sub.add_parser("sweep", help="alpha sweep between two checkpoints")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--step", type=float, default=0.1)
    s.add_argument("--sigma", required=True, help="noise level or comma list")
    s.add_argument("--test", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--test-seed", type=int, default=1000)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("correlate", help="filter correlation against a reference model")
    c.add_argument("--models", required=True)
    c.add_argument("--ref", required=True)
    c.add_argument("--layer", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--mode", choices=[analysis.POSITIONWISE, analysis.FIRST], default=analysis.POSITIONWISE)
    c.add_argument("--csv")
    c.set_defaults(func=cmd_correlate)

    d = sub.add_parser("denoise", help="denoise one image")
    d.add_argument("--model", required=True)
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--ref")
    d.add_argument("--mask", help="grayscale mask; white selects --model, black --model-b")
    d.add_argument("--model-b")
    d.set_defaults(func=cmd_denoise)

    fb = sub.add_parser("fold-bn", help="fold BatchNorm into the preceding convolutions")
    fb.add_argument("--in", dest="input", required=True)
    fb.add_argument("--out", required=True)
    fb.set_defaults(func=cmd_fold_bn)

    st = sub.add_parser("study", help="run a study from a JSON config")
    st.add_argument("kind", choices=["unseen-noise", "correlation"])
    st.add_argument("--config", required=True)
    st.set_defaults(func=cmd_study)

    ps = sub.add_parser("psnr", help="PSNR between two images")
    ps.add_argument("--ref", required=True)
    ps.add_argument("--test", required=True)
    ps.set_defaults(func=cmd_psnr)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"dni {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
