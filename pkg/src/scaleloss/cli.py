"""``scaleloss`` command-line entry point.

Subcommands: eval, loss, curves, demo, sweep, relay-demo. Artifact files go
to ``--out`` (a directory), falling back to ``$SCALELOSS_OUT_DIR`` and then to
the current directory. Every write is atomic.

Exit codes: 0 success, 2 usage error, 3 input parse error, 4 configuration
error (including unwritable output), 5 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import config_comment, csv_text, atomic_write_text, line_chart_svg
from .errors import ConfigError, DivergenceError, IngestionError, ScaleLossError
from .evaluator import EvalConfig, evaluate, format_table, load_coco_dets, load_coco_gt, report_rows
from .harness import (
    DEFAULT_BETAS,
    DEFAULT_LR,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    SWEEP_HEADER,
    SceneConfig,
    beta_sweep,
    gen_scene,
    iou_decay_curve,
    loss_share_report,
    regress,
)
from .losses import LossConfig, bce_mean, l1_loss, sfl_terms, sfl_weights
from .kernels import paired_iou_grad
from .relay import DEFAULT_KERNEL_SIZE, DEFAULT_REDUCTION, init_relay_params, random_pyramid, relay_forward
from .boxgeom import normalized_areas

log = logging.getLogger("scaleloss")

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_CONFIG = 4
EXIT_DIVERGED = 5

OUT_DIR_ENV = "SCALELOSS_OUT_DIR"
PAIR_COLUMNS = ("gt_x", "gt_y", "gt_w", "gt_h", "pr_x", "pr_y", "pr_w", "pr_h")
LOGIT_COLUMNS = ("cls_logit", "cls_target", "obj_logit", "obj_target")


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _thresholds(text):
    """``start:step:stop`` range or a comma list."""
    if ":" in text:
        try:
            start, step, stop = (float(v) for v in text.split(":"))
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"expected start:step:stop, got {text!r}") from e
        if step <= 0 or stop < start:
            raise argparse.ArgumentTypeError(f"empty threshold range {text!r}")
        n = int(round((stop - start) / step)) + 1
        return [float(v) for v in np.linspace(start, start + step * (n - 1), n)]
    return _float_list(text)


def _out_dir(args) -> Path | None:
    if args.out:
        return Path(args.out)
    env = os.environ.get(OUT_DIR_ENV)
    return Path(env) if env else None


def _write(out_dir: Path, name: str, text: str) -> Path:
    try:
        path = atomic_write_text(out_dir / name, text)
    except OSError as e:
        raise ConfigError(f"cannot write {out_dir / name}: {e.strerror}") from e
    log.info("wrote %s", path)
    return path


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    gts = load_coco_gt(args.gt)
    dets = load_coco_dets(args.dets)
    kwargs = {"max_dets_per_image": args.max_dets}
    if args.iou_thresholds:
        kwargs["iou_thresholds"] = tuple(args.iou_thresholds)
    report = evaluate(gts, dets, EvalConfig(**kwargs))
    print(format_table(report, gts.categories))
    out = _out_dir(args)
    if out is not None:
        _write(out, "eval_report.csv", csv_text(("metric", "value"), report_rows(report, gts.categories)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def read_pairs(path):
    """Parse a pairs CSV; returns ``(gt, pred, logits)``.

    ``logits`` maps the optional cls/obj logit and target columns to arrays.
    """
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise IngestionError(f"cannot read pairs file {path}: {e.strerror}", [str(path)]) from e
    with fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        cols = reader.fieldnames or []
        missing = [c for c in PAIR_COLUMNS if c not in cols]
        if missing:
            raise IngestionError(f"{path}: header lacks column(s) {', '.join(missing)}", ["header"])
        extra = [c for c in LOGIT_COLUMNS if c in cols]
        rows, logit_rows = [], []
        for n, rec in enumerate(reader, start=1):
            where = f"{path}: row {n}"
            try:
                vals = [float(rec[c]) for c in PAIR_COLUMNS]
                lg = [float(rec[c]) for c in extra]
            except (TypeError, ValueError) as e:
                raise IngestionError(f"{where}: non-numeric or missing value", [where]) from e
            if not all(math.isfinite(v) for v in vals + lg):
                raise IngestionError(f"{where}: non-finite value", [where])
            if min(vals[2], vals[3], vals[6], vals[7]) <= 0:
                raise IngestionError(f"{where}: box width and height must be > 0", [where])
            rows.append(vals)
            logit_rows.append(lg)
    if not rows:
        raise IngestionError(f"{path}: no pair rows", [str(path)])
    arr = np.array(rows)
    logits = {}
    if extra:
        la = np.array(logit_rows)
        logits = {c: la[:, i] for i, c in enumerate(extra)}
    return arr[:, :4], arr[:, 4:], logits


def cmd_loss(args) -> int:
    cfg = LossConfig(alpha=args.alpha, beta=args.beta)
    gt, pred, logits = read_pairs(args.pairs)
    l1 = l1_loss((gt, pred))
    terms = sfl_terms((gt, pred), cfg.beta)
    s = float(sum(terms.tolist()))
    pos = l1 + cfg.alpha * s
    cls = bce_mean(logits["cls_logit"], logits["cls_target"]) if "cls_logit" in logits else 0.0
    obj = bce_mean(logits["obj_logit"], logits["obj_target"]) if "obj_logit" in logits else 0.0
    summary = [("cls", cls), ("obj", obj), ("l1", l1), ("sfl", s), ("pos", pos), ("total", cls + obj + pos)]
    print(f"alpha={cfg.alpha!r} beta={cfg.beta!r}")
    for k, v in summary:
        print(f"{k:<6} {v:.9f}")
    norm = normalized_areas(gt)
    weights = sfl_weights((gt, pred), cfg.beta)
    iou = paired_iou_grad(gt, pred)[0]
    print(f"{'pair':>5} {'s':>10} {'weight':>12} {'iou':>10} {'sfl_term':>12}")
    per_object = []
    for i in range(gt.shape[0]):
        per_object.append((i, float(norm[i]), float(weights[i]), float(iou[i]), float(terms[i])))
        print(f"{i:>5} {norm[i]:>10.6f} {weights[i]:>12.6f} {iou[i]:>10.6f} {terms[i]:>12.6f}")
    out = _out_dir(args)
    if out is not None:
        _write(out, "loss_summary.csv", csv_text(("component", "value"), summary, config_comment(
            {"alpha": cfg.alpha, "beta": cfg.beta})))
        _write(out, "loss_objects.csv", csv_text(("pair", "s", "weight", "iou", "sfl_term"), per_object))
    return EXIT_OK


# ---------------------------------------------------------------------------
# harness commands
# ---------------------------------------------------------------------------


def cmd_curves(args) -> int:
    rows = iou_decay_curve(args.sides, args.shifts)
    out = _out_dir(args) or Path(".")
    header = ("side", "shift", "iou", "plain_loss")
    _write(out, "iou_decay.csv", csv_text(header, rows))
    if not args.no_svg:
        series = {}
        for side, shift, v, _ in rows:
            series.setdefault(f"side {side:g}px", []).append((shift, v))
        svg = line_chart_svg(series, "IoU under a one-axis shift", "shift (px)", "IoU")
        _write(out, "iou_decay.svg", svg)
    print(f"{'side':>6} {'shift':>6} {'iou':>10} {'1-iou^2':>10}")
    for side, shift, v, loss in rows:
        print(f"{side:>6g} {shift:>6g} {v:>10.6f} {loss:>10.6f}")
    return EXIT_OK


def _scene_cfg(args) -> SceneConfig:
    return SceneConfig(
        counts=tuple(args.counts),
        translation=args.translation,
        scale=args.scale,
        jitter=args.jitter,
        seed=args.seed,
    )


def cmd_demo(args) -> int:
    scene = _scene_cfg(args)
    cfg = LossConfig(alpha=args.alpha, beta=args.beta)
    gts, preds = gen_scene(scene)
    plain = regress(gts, preds, "plain", cfg, args.steps, args.lr)
    sfl = regress(gts, preds, "sfl", cfg, args.steps, args.lr)
    for tr in (plain, sfl):
        if not tr.ok:
            raise DivergenceError(f"{tr.variant} regression diverged", tr.failed_step)
    report = loss_share_report(plain, sfl)
    comment = config_comment({"seed": args.seed, "alpha": cfg.alpha, "beta": cfg.beta, "lr": args.lr,
                              "steps": args.steps, "translation": args.translation, "jitter": args.jitter})
    out = _out_dir(args) or Path(".")
    _write(out, "loss_shares.csv", csv_text(report.HEADER, report.table_rows(), comment))
    bucket_rows = [(name, plain.final_bucket_iou[name], sfl.final_bucket_iou[name]) for name in plain.final_bucket_iou]
    _write(out, "final_iou.csv", csv_text(("bucket", "iou_plain", "iou_sfl"), bucket_rows, comment))

    print(f"{'tercile':>7} {'n':>3} {'area range':>17} {'share plain':>12} {'share sfl':>10} {'|g| plain':>10} {'|g| sfl':>10}")
    for r in report.rows:
        if r["count"] == 0:
            continue
        rng = f"{r['area_min']:.1f}-{r['area_max']:.1f}"
        print(f"{r['tercile']:>7} {r['count']:>3} {rng:>17} {r['share_plain']:>12.4f} {r['share_sfl']:>10.4f}"
              f" {r['grad_plain']:>10.4f} {r['grad_sfl']:>10.4f}")
    print("smallest tercile rebalanced:", "yes" if report.rebalanced else "no")
    if report.distinct_areas and not report.rebalanced:
        log.error("smallest-area tercile did not gain loss share under SFL")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_sweep(args) -> int:
    scene = _scene_cfg(args)
    betas = args.betas if args.betas else list(DEFAULT_BETAS)
    rows = beta_sweep(scene, betas, args.steps, args.lr, args.alpha)
    comment = config_comment({"seed": args.seed, "alpha": args.alpha, "beta": "sweep", "lr": args.lr,
                              "steps": args.steps, "translation": args.translation, "jitter": args.jitter})
    out = _out_dir(args) or Path(".")
    _write(out, "beta_sweep.csv", csv_text(SWEEP_HEADER, rows, comment))
    print(" ".join(f"{h:>12}" for h in SWEEP_HEADER))
    for row in rows:
        print(" ".join(f"{'-':>12}" if v is None else f"{v:>12.6f}" for v in row))
    return EXIT_OK


def _shapes(text):
    shapes = []
    for part in text.split(","):
        try:
            dims = tuple(int(v) for v in part.lower().split("x"))
        except ValueError as e:
            raise argparse.ArgumentTypeError(f"bad level shape {part!r}; use CxHxW") from e
        if len(dims) != 3:
            raise argparse.ArgumentTypeError(f"bad level shape {part!r}; use CxHxW")
        shapes.append(dims)
    return shapes


def cmd_relay(args) -> int:
    param_seed, input_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(args.seed).spawn(2))
    params = init_relay_params([s[0] for s in args.shapes], args.reduction, param_seed, args.kernel_size)
    pyramid = random_pyramid(args.shapes, seed=input_seed)
    out_pyr, gates = relay_forward(pyramid, params, return_attention=True)
    rows = []
    ok = True
    for i, (x, y, (a_c, a_s)) in enumerate(zip(pyramid.levels, out_pyr.levels, gates)):
        in_range = bool(a_c.min() > 0 and a_c.max() < 1 and a_s.min() > 0 and a_s.max() < 1)
        ok &= in_range and x.shape == y.shape and bool(np.all(np.isfinite(y.data)))
        rows.append((i, "x".join(map(str, x.shape)), "x".join(map(str, y.shape)),
                     float(y.data.min()), float(y.data.max()), float(y.data.mean()),
                     float(a_c.min()), float(a_c.max()), float(a_s.min()), float(a_s.max()), in_range))
    header = ("level", "in_shape", "out_shape", "out_min", "out_max", "out_mean",
              "chan_att_min", "chan_att_max", "spat_att_min", "spat_att_max", "attention_in_open_unit")
    print(f"{'lvl':>3} {'in':>14} {'out':>14} {'min':>9} {'max':>9} {'mean':>9} {'A_c range':>19} {'A_s range':>19}")
    for r in rows:
        print(f"{r[0]:>3} {r[1]:>14} {r[2]:>14} {r[3]:>9.4f} {r[4]:>9.4f} {r[5]:>9.4f}"
              f" [{r[6]:.4f}, {r[7]:.4f}] [{r[8]:.4f}, {r[9]:.4f}]")
    print("attention ranges inside (0, 1) and shapes preserved:", "yes" if ok else "no")
    out = _out_dir(args)
    if out is not None:
        _write(out, "relay_demo.csv", csv_text(header, rows, config_comment(
            {"seed": args.seed, "reduction": args.reduction, "kernel_size": args.kernel_size})))
    return EXIT_OK if ok else EXIT_DIVERGED


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scaleloss", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add_out(sp):
        sp.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or cwd)")

    def add_loss(sp):
        sp.add_argument("--alpha", type=float, default=1.0, help="L1/SFL mixing factor (default 1.0)")
        sp.add_argument("--beta", type=float, default=2.0 / math.log(2.0), help="SFL scale (default 2/ln 2)")

    def add_scene(sp):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="gradient steps")
        sp.add_argument("--lr", type=float, default=DEFAULT_LR)
        sp.add_argument("--counts", type=lambda s: [int(v) for v in s.split(",")], default=[8, 8, 8, 8],
                        help="objects per bucket vt,t,s,m")
        sp.add_argument("--translation", type=float, default=0.3)
        sp.add_argument("--scale", type=float, default=0.0)
        sp.add_argument("--jitter", choices=("axis", "random"), default="axis")

    sp = sub.add_parser("eval", help="evaluate COCO-format detections")
    sp.add_argument("gt", help="COCO annotation JSON")
    sp.add_argument("dets", help="COCO results JSON")
    sp.add_argument("--max-dets", type=int, default=100, help="detections kept per image (default 100)")
    sp.add_argument("--iou-thresholds", type=_thresholds, help="start:step:stop or comma list")
    add_out(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("loss", help="loss breakdown for a pairs CSV")
    sp.add_argument("pairs", help="CSV with columns " + ",".join(PAIR_COLUMNS))
    add_loss(sp)
    add_out(sp)
    sp.set_defaults(func=cmd_loss)

    sp = sub.add_parser("curves", help="IoU decay under one-axis shifts")
    sp.add_argument("--sides", type=_float_list, default=[4.0, 8.0, 16.0, 32.0, 64.0],
                    help="comma list of box sides")
    sp.add_argument("--shifts", type=_float_list, default=[0.0, 0.5, 1.0, 2.0, 3.0, 4.0],
                    help="comma list of shifts in pixels")
    sp.add_argument("--no-svg", action="store_true", help="skip the SVG plot")
    add_out(sp)
    sp.set_defaults(func=cmd_curves)

    sp = sub.add_parser("demo", help="loss-share comparison, plain vs SFL")
    add_scene(sp)
    add_loss(sp)
    add_out(sp)
    sp.set_defaults(func=cmd_demo)

    sp = sub.add_parser("sweep", help="final IoU per bucket across beta values")
    add_scene(sp)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--betas", type=_float_list, help="default 1, 1/ln 2, 2/ln 2")
    add_out(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("relay-demo", help="run the relay layer on a random pyramid")
    sp.add_argument("--shapes", type=_shapes, default=_shapes("256x80x80,512x40x40,1024x20x20"),
                    help="levels as CxHxW, comma separated, finest first")
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sp.add_argument("--reduction", type=int, default=DEFAULT_REDUCTION)
    sp.add_argument("--kernel-size", type=int, default=DEFAULT_KERNEL_SIZE)
    add_out(sp)
    sp.set_defaults(func=cmd_relay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except IngestionError as e:
        print(f"error: {e}", file=sys.stderr)
        for rec in e.records[:50]:
            print(f"  {rec}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as e:
        print(f"error: {e} (step {e.step})", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ScaleLossError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
