"""Command-line entry point: ``artifit {gen,fit,gradcheck,eval}``.

Exit codes: 0 success, 1 I/O or input failure, 2 bad flags, 3 divergence
during fitting, 4 gradient check above tolerance.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3, 4
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_threads(n: int) -> None:
    # effective when set before numpy loads its BLAS, i.e. for the console script
    for var in THREAD_VARS:
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="artifit", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=int(os.environ.get("ARTIFIT_THREADS", "1")),
                        help="worker threads (env ARTIFIT_THREADS); 1 forces serial execution")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more progress output")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset", formatter_class=fmt)
    g.add_argument("--category", choices=("laptop2", "drawer2", "basket3"), required=True, help="object category")
    g.add_argument("--count", type=int, required=True, help="number of instances")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--partial", action="store_true", help="single-view partial observations")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    g.add_argument("--points", type=int, default=256, help="points per cloud")
    g.add_argument("--outlier-rate", type=float, default=0.0, help="fraction of points replaced by outliers")
    g.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std on inlier points")
    g.add_argument("--max-rotation", type=float, default=45.0, help="max global rotation angle in degrees")

    f = sub.add_parser("fit", help="fit the energy on a dataset", formatter_class=fmt)
    f.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    f.add_argument("--out", required=True, help="output directory for state and loss curve")
    f.add_argument("--iters", type=int, default=20000, help="iterations")
    f.add_argument("--batch", type=int, default=24, help="instances per step")
    f.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    f.add_argument("--halving", type=int, default=5000, help="halve the learning rate every this many iterations")
    f.add_argument("--seed", type=int, default=0, help="random seed")
    f.add_argument("--alpha-l", type=float, default=30.0, help="DCD temperature, input to reconstruction")
    f.add_argument("--alpha-r", type=float, default=120.0, help="DCD temperature, reconstruction to input")
    f.add_argument("--knn", type=int, default=64, help="neighbours in the density regularizer")
    f.add_argument("--beta", type=float, default=0.05, help="minimum part-size hinge")
    f.add_argument("--exponent", choices=("sq", "l2"), default="sq", help="DCD distance exponent")
    f.add_argument("--weight", action="append", default=[], metavar="TERM=VALUE",
                   help="override a loss weight (o, p, regS, regD, regW, regP, regA, regJ)")
    f.add_argument("--assign-refresh", type=int, default=1, help="reselect part assignment every N iterations")
    f.add_argument("--augment", action="store_true", help="random input rotation per step")
    f.add_argument("--checkpoint-every", type=int, default=0, help="write a checkpoint every N iterations (0: never)")
    f.add_argument("--resume", default=None, help="continue from a state or checkpoint file")
    f.add_argument("--log-every", type=int, default=100, help="progress line interval (with -v)")

    c = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients", formatter_class=fmt)
    c.add_argument("--instances", type=int, default=100, help="random instances")
    c.add_argument("--seed", type=int, default=0, help="random seed")
    c.add_argument("--points", type=int, default=32, help="points per instance")
    c.add_argument("--per-key", type=int, default=4, help="coordinates sampled per parameter array (0: all)")
    c.add_argument("--h", type=float, default=1e-5, help="finite-difference step")
    c.add_argument("--stencil", type=int, choices=(3, 5), default=5, help="central stencil width")
    c.add_argument("--tol", type=float, default=1e-3, help="max relative error")
    c.add_argument("--term", action="append", default=None,
                   help="restrict to a term (repeatable): o, p, regS, regD, regW, regP, regA, regJ, total")

    e = sub.add_parser("eval", help="evaluate a fitted state against ground truth", formatter_class=fmt)
    e.add_argument("--data", required=True, help="dataset directory (with manifest.json)")
    e.add_argument("--state", required=True, help="fitted state file")
    e.add_argument("--out", required=True, help="report path")
    e.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    e.add_argument("--split", choices=("parity", "all"), default="parity",
                   help="parity: calibrate on even, score odd instances; all: both on every instance")
    e.add_argument("--seed", type=int, default=0, help="RANSAC seed")
    e.add_argument("--unfolded", action="store_true", help="report direction error up to 180 degrees")
    e.add_argument("--svg", default=None, help="directory for SVG loss and AP curves")
    e.add_argument("--loss", default=None, help="loss-curve CSV to plot (with --svg)")
    return parser


def _log(args, msg: str, level: int = 1) -> None:
    if args.verbose >= level:
        print(msg, file=sys.stderr)


# -- gen ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .synthgen import category, gen_dataset

    if args.count < 0 or args.points < 4:
        print("error: --count must be >= 0 and --points >= 4", file=sys.stderr)
        return EXIT_USAGE
    spec = category(args.category)
    gen_dataset(spec, args.count, args.seed, args.out, args.partial, args.outlier_rate, args.noise,
                args.points, args.max_rotation)
    print(f"wrote {args.count} {args.category} instances to {args.out}")
    return EXIT_OK


# -- fit ---------------------------------------------------------------------------


def load_dataset(root):
    from .cloud import load_cloud
    from .fit import prepare_data
    from .synthgen import CategorySpec, load_manifest, read_gt

    manifest = load_manifest(root)
    base = Path(manifest["root"])
    spec = CategorySpec.from_dict(manifest["spec"])
    clouds = [load_cloud(base / inst["cloud_path"]) for inst in manifest["instances"]]
    gts = [read_gt(base / inst["gt_path"]) for inst in manifest["instances"]]
    return spec, prepare_data(clouds, spec.joint_specs, spec.n_parts), gts


def _parse_weights(items):
    from .energy import TERMS, LossWeights

    vals = {}
    for item in items:
        term, _, value = item.partition("=")
        if term not in TERMS or not value:
            raise ValueError(f"bad --weight {item!r}; expected TERM=VALUE with TERM in {TERMS}")
        vals[term] = float(value)
    return LossWeights(**vals)


def write_loss_csv(log, path) -> None:
    from .energy import TERMS

    cols = ["iteration", "lr", "total", *TERMS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for rec in log:
            w.writerow([rec["iteration"], repr(rec["lr"])] + [repr(rec[c]) for c in cols[2:]])


def cmd_fit(args) -> int:
    from .fit import DivergenceError, FitConfig, export_state, fit_run, import_state, init_state

    try:
        weights = _parse_weights(args.weight)
        config = FitConfig(iterations=args.iters, batch_size=args.batch, lr=args.lr, halving_interval=args.halving,
                           weights=weights, alpha_l=args.alpha_l, alpha_r=args.alpha_r, knn_k=args.knn,
                           beta=args.beta, exponent=args.exponent, seed=args.seed,
                           assign_refresh=args.assign_refresh, augment=args.augment)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    spec, data, _ = load_dataset(args.data)
    if len(data) == 0:
        print("error: dataset is empty", file=sys.stderr)
        return EXIT_IO
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = import_state(args.resume)
        config = FitConfig.from_dict({**state.config.to_dict(), "iterations": args.iters})
        state.config = config
    else:
        state = init_state(data, config)
    print(f"fit {spec.name}: instances={len(data)} iterations={config.iterations} "
          f"batch={config.batch_size} lr={config.lr} halving={config.halving_interval} seed={config.seed}")

    def on_step(rec):
        if args.log_every and rec["iteration"] % args.log_every == 0:
            _log(args, f"iter {rec['iteration']:6d} total {rec['total']:.6f} lr {rec['lr']:.3g}")

    def on_checkpoint(st):
        export_state(st, out / f"ckpt_{st.iteration:06d}.json")

    try:
        state, log = fit_run(data, config, state, args.checkpoint_every, on_checkpoint, on_step)
    except DivergenceError as exc:
        print(f"diverged: term {exc.term} became non-finite at iteration {exc.iteration}", file=sys.stderr)
        return EXIT_DIVERGED
    export_state(state, out / "state.json")
    write_loss_csv(log, out / "loss.csv")
    if log:
        print(f"final total {log[-1]['total']:.6f} after {state.iteration} iterations")
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECK_TERMS, run_suite

    terms = tuple(args.term) if args.term else CHECK_TERMS
    bad = [t for t in terms if t not in CHECK_TERMS]
    if bad:
        print(f"error: unknown term(s) {bad}; choose from {CHECK_TERMS}", file=sys.stderr)
        return EXIT_USAGE
    report = run_suite(args.instances, args.seed, args.points, args.per_key or None, args.h, terms, args.stencil)
    failed = False
    print(f"checked {report.checked} coordinates, skipped {report.skipped} in tie regions")
    for t in terms:
        ok = report.max_rel[t] < args.tol
        failed |= not ok
        print(f"{t:6s} max_rel={report.max_rel[t]:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_GRADCHECK if failed else EXIT_OK


# -- eval ----------------------------------------------------------------------------


def svg_polyline(series: dict, path, title: str, xlabel: str, ylabel: str, logy: bool = False) -> None:
    """Minimal static line chart; ``series`` maps a name to ``(xs, ys)``."""
    import numpy as np

    w, h, pad = 640, 400, 50
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    xs_all = np.concatenate([np.asarray(x, float) for x, _ in series.values()])
    ys_all = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    if logy:
        ys_all = np.log10(np.maximum(ys_all, 1e-12))
    x0, x1 = float(xs_all.min()), float(xs_all.max()) or 1.0
    y0, y1 = float(ys_all.min()), float(ys_all.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{w / 2}" y="{h - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="15" y="{h / 2}" font-size="12" transform="rotate(-90 15 {h / 2})">{ylabel}</text>',
             f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="black"/>']
    for k, (name, (xs, ys)) in enumerate(series.items()):
        ys = np.asarray(ys, float)
        if logy:
            ys = np.log10(np.maximum(ys, 1e-12))
        px = pad + (np.asarray(xs, float) - x0) / (x1 - x0) * (w - 2 * pad)
        py = h - pad - (ys - y0) / (y1 - y0) * (h - 2 * pad)
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
        col = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{w - pad - 5}" y="{pad + 15 + 15 * k}" text-anchor="end" font-size="11" '
                     f'fill="{col}">{name}</text>')
    parts.append(f'<text x="{pad}" y="{h - pad + 15}" font-size="10">{x0:g}</text>')
    parts.append(f'<text x="{w - pad}" y="{h - pad + 15}" text-anchor="end" font-size="10">{x1:g}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def evaluate(spec, data, gts, state, split="parity", seed=0, fold=True):
    """Calibrate common poses on the training split and score the test split."""
    import numpy as np

    from .evalkit import (common_pose_samples, instance_errors, map_table, ransac_common_pose,
                          relative_to_absolute, segmentation_iou)
    from .fit import fitted_instance

    n = len(data)
    if state.n_instances != n:
        raise ValueError(f"state has {state.n_instances} instances, dataset has {n}")
    if split == "parity":
        train, test = list(range(0, n, 2)), list(range(1, n, 2))
    else:
        train, test = list(range(n)), list(range(n))
    fitted = {i: fitted_instance(state, data, i) for i in sorted(set(train) | set(test))}
    rots, trans = [], []
    for i in train:
        _, _, perm = segmentation_iou(fitted[i].seg_probs, gts[i].labels)
        c_rot, c_trans = common_pose_samples(fitted[i], gts[i].rotations, gts[i].translations, perm)
        order = np.argsort(perm)  # predicted label -> ground-truth part
        rots.append(c_rot[order])
        trans.append(c_trans[order])
    common_rot, common_trans, _ = ransac_common_pose(np.stack(rots), np.stack(trans), seed=seed)
    gt_pairs = [(jt.parent, jt.child) for jt in spec.joints]
    kinds = [jt.kind for jt in spec.joints]
    errors = []
    for i in test:
        pred = relative_to_absolute(fitted[i], common_rot, common_trans, kinds)
        errors.append(instance_errors(pred, gts[i], gt_pairs, fold))
    return map_table(errors), errors


def cmd_eval(args) -> int:
    from .evalkit import emit_report
    from .fit import import_state

    t0 = time.time()
    spec, data, gts = load_dataset(args.data)
    state = import_state(args.state)
    table, _ = evaluate(spec, data, gts, state, args.split, args.seed, not args.unfolded)
    emit_report(table, args.out, args.format, spec.name)
    for fam, thr, val in table:
        print(f"{fam:12s} {thr:20s} {val:8.3f}")
    if args.svg:
        svg_dir = Path(args.svg)
        svg_dir.mkdir(parents=True, exist_ok=True)
        _ap_curves(table, svg_dir / "ap_curves.svg")
        if args.loss:
            with open(args.loss, newline="") as fh:
                rows = list(csv.DictReader(fh))
            if rows:
                it = [int(r["iteration"]) for r in rows]
                svg_polyline({"total": (it, [float(r["total"]) for r in rows])}, svg_dir / "loss.svg",
                             "loss curve", "iteration", "log10 total energy", logy=True)
    print(f"eval wall-clock {time.time() - t0:.1f}s", file=sys.stderr)
    return EXIT_OK


def _ap_curves(table, path) -> None:
    series = {}
    for fam in ("Part", "Joint"):
        rows = [(thr, val) for f, thr, val in table if f == fam and "deg_" in thr]
        xs = [float(thr.split("deg_")[0]) for thr, _ in rows]
        series[fam] = (xs, [v for _, v in rows])
    svg_polyline(series, path, "AP vs threshold", "rotation threshold (deg)", "AP (%)")


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "gradcheck": cmd_gradcheck, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _apply_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
