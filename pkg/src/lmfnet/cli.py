"""Command-line entry point: analyze, train, predict, eval, gradcheck.

Exit codes: 0 success, 1 usage/config/data error, 2 gridding gate failure,
3 numerical failure.  With ``--output-format json`` stdout carries exactly
one JSON document; logs always go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .errors import LMFError, NumericalError

log = logging.getLogger("lmfnet")

EXIT_OK, EXIT_CONFIG, EXIT_GRIDDING, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.output_format == "json":
        sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    else:
        sys.stdout.write((text if text is not None else _as_text(payload)) + "\n")


def _as_text(payload: dict) -> str:
    return "\n".join(f"{k:<20}{v}" for k, v in payload.items() if not isinstance(v, (list, dict)))


def _config(args):
    from .network import load_config, packaged_config

    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        return load_config(args.config)
    try:
        return packaged_config(args.preset or args.default_preset)
    except FileNotFoundError:
        raise UsageError(f"unknown preset {args.preset!r}") from None


def _threads():
    raw = os.environ.get("LMF_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LMF_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError(f"LMF_THREADS must be >= 0, got {n}")
    if n == 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {p} is not a directory")
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_analyze(args) -> int:
    from .analysis import analyze_network

    report = analyze_network(_config(args))
    _emit(args, report.to_dict(), report.to_text())
    return EXIT_OK if report.gridding_passed else EXIT_GRIDDING


def _recipe(args, classifier: bool):
    from .training import Recipe, load_recipe

    if args.recipe:
        recipe = load_recipe(args.recipe)
    else:
        recipe = Recipe.classifier_default() if classifier else Recipe.sod_default()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.strict_deterministic:
        overrides["strict_deterministic"] = True
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    if overrides:
        recipe = type(recipe).from_dict({**recipe.to_dict(), **overrides})
    if args.epochs is not None:
        recipe = recipe.scaled_to(args.epochs)
    return recipe


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .dataio import load_cifar_arrays, load_sod_dataset, pair_sod_dataset
    from .network import build_classifier, build_sod_network

    config = _config(args)
    classifier = config.head.kind == "classifier"
    recipe = _recipe(args, classifier)
    out = Path(args.out)
    data = Path(args.data)
    if not data.exists():
        raise UsageError(f"training data {data} does not exist")
    out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(recipe.dtype)

    if classifier:
        from .training import train_classifier

        images, labels = load_cifar_arrays(data, args.num_classes)
        eval_images = eval_labels = None
        if args.eval_data:
            eval_images, eval_labels = load_cifar_arrays(args.eval_data, args.num_classes)
        net = build_classifier(config, num_classes=args.num_classes, seed=recipe.seed, dtype=dtype)
        result = train_classifier(net, images, labels, recipe, eval_images, eval_labels, checkpoint_dir=out,
                                  eval_every=args.eval_every)
    else:
        from .training import train_sod

        pairs = pair_sod_dataset(_require_dir(data / "images", "image dir"), _require_dir(data / "masks", "mask dir"))
        images, masks = load_sod_dataset(pairs, size=config.input_size, dtype=dtype)
        net = build_sod_network(config, seed=recipe.seed, dtype=dtype)
        result = train_sod(net, images, masks, recipe, checkpoint_dir=out)

    save_checkpoint(out / "final.lmfk", net, None, {"recipe": recipe.to_dict()})
    history = {"recipe": recipe.to_dict(), **result.to_dict()}
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n")
    summary = {
        "epochs": len(result.epoch_losses),
        "steps": result.steps,
        "final_loss": result.epoch_losses[-1],
        "best_loss": result.best_loss,
        "best_epoch": result.best_epoch,
        "checkpoint": str(out / "final.lmfk"),
        "history": str(out / "history.json"),
    }
    if result.train_top1:
        summary["train_top1"] = result.train_top1[-1]
    if result.eval_top1:
        summary["eval_top1"] = result.eval_top1[-1]
    _emit(args, summary)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint
    from .dataio import IMAGE_SUFFIXES, load_rgb, save_image
    from .kernels import resize_bilinear

    net, _ = load_checkpoint(args.checkpoint)
    if net.config.head.kind != "saliency":
        raise UsageError("predict needs a saliency checkpoint")
    src = _require_dir(args.images, "image dir")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = net.config.input_size
    net.eval()
    written, failed = [], []
    for path in sorted(p for p in src.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES):
        try:
            img = load_rgb(path)
        except LMFError as exc:
            log.error("%s", exc)
            failed.append({"file": path.name, "error": str(exc)})
            continue
        size = img.shape[1:]
        if size != (h, w):
            if not args.resize:
                msg = f"{path.name}: {size[0]}x{size[1]} does not match the network's {h}x{w}; pass --resize"
                log.error("%s", msg)
                failed.append({"file": path.name, "error": msg})
                continue
            log.warning("%s: resizing %dx%d to %dx%d", path.name, size[0], size[1], h, w)
            img = resize_bilinear(img[None], h, w)[0][0]
        s = net.forward(img[None].astype(net.dtype))[0, 0]
        if size != (h, w):
            s = resize_bilinear(s[None, None], *size)[0][0, 0]
        target = out / f"{path.stem}.pgm"
        save_image(s, target)
        written.append(str(target))
    _emit(args, {"written": written, "failed": failed, "count": len(written)},
          "\n".join(written + [f"FAILED {f['file']}: {f['error']}" for f in failed]))
    return EXIT_CONFIG if failed else EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset

    report = evaluate_dataset(args.pred, args.gt)
    if args.curves:
        Path(args.curves).write_text(report.curves_csv())
    payload = report.to_dict(curves=args.output_format == "json")
    text = "\n".join(
        f"{k:<16}{v}" for k, v in report.to_dict(curves=False).items()
    )
    _emit(args, payload, text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import kernel_suite, loss_suite, network_check
    from .network import build_sod_network

    config = _config(args)
    tol = args.tol
    results = {}
    for name, rep in kernel_suite(args.eps, args.seed).items():
        results[f"kernel/{name}"] = rep
    for name, rep in loss_suite(args.eps, args.seed).items():
        results[f"loss/{name}"] = rep
    if not args.skip_network:
        net = build_sod_network(config, seed=args.seed)
        results["network"] = network_check(net, batch=args.batch, eps=args.eps,
                                           entries_per_tensor=args.entries, seed=args.seed)
    rows = {
        name: {"max_rel_error": rep.max_rel_error, "passed": rep.passed(tol),
               "gate_crossings": rep.gate_crossings, "frozen_gates": rep.frozen_gates}
        for name, rep in results.items()
    }
    ok = all(r["passed"] for r in rows.values())
    text = "\n".join(
        f"{'PASS' if r['passed'] else 'FAIL'}  {name:<32}{r['max_rel_error']:.3e}"
        + (f"  gate crossings {r['gate_crossings']}" if r["frozen_gates"] else "")
        for name, r in rows.items()
    )
    _emit(args, {"eps": args.eps, "tolerance": tol, "passed": ok, "checks": rows}, text)
    return EXIT_OK if ok else EXIT_NUMERICAL


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmfnet", description="Multi-scale lightweight saliency networks on numpy.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_preset="default"):
        p.add_argument("--output-format", choices=("text", "json"), default="text")
        p.set_defaults(default_preset=default_preset)

    def config_args(p):
        p.add_argument("--config", help="network config JSON")
        p.add_argument("--preset", help="name of a packaged config (default, tiny, width_0.8, ...)")

    p = sub.add_parser("analyze", help="params, FLOPs, receptive fields and the gridding gate")
    config_args(p)
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train a saliency network or a classifier")
    config_args(p)
    p.add_argument("--recipe", help="recipe JSON (defaults depend on the head kind)")
    p.add_argument("--data", required=True,
                   help="SOD: directory with images/ and masks/; classifier: CIFAR binary file")
    p.add_argument("--eval-data", help="held-out CIFAR binary file (classifier only)")
    p.add_argument("--num-classes", type=int, default=10, choices=(10, 100))
    p.add_argument("--out", required=True, help="output directory for checkpoints and history")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="override epochs; multistep milestones scale along")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--eval-every", type=int, default=1, help="accuracy pass period in epochs (classifier)")
    p.add_argument("--strict-deterministic", action="store_true",
                   help="single-threaded BLAS and no prefetch thread")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write saliency maps as 8-bit PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of PPM/PGM inputs")
    p.add_argument("--out", required=True)
    p.add_argument("--resize", action="store_true", help="resize inputs to the network resolution and back")
    common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="MAE, max F, max E and S-measure over a prediction directory")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--curves", help="write the averaged PR/F curve as CSV")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of kernels, losses and a network")
    config_args(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--entries", type=int, default=1, help="sampled entries per parameter tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-network", action="store_true")
    common(p, default_preset="tiny")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        with _threads():
            return args.func(args)
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (LMFError, UsageError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
