"""Command-line entry point.

Subcommands: eval, gradcheck, train-toy, ablate, bench, flops, featmap.
Exit codes: 0 success, 1 check failure, 2 input error. The environment
variable PAVEDET_SEED overrides --seed for every command that takes one.
Report-writing commands save charts next to their JSON/text output.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import blocks as B
from . import data as D
from . import figures as F
from . import tensor as T
from . import toynet as N
from .bench import bench_report, measure_fps
from .evaluation import eval_report, report_to_json, report_to_text
from .tensor import Tensor


def _parse_placements(text: str) -> frozenset:
    text = text.strip()
    if not text:
        return frozenset()
    try:
        return frozenset(int(tok) for tok in text.split(","))
    except ValueError:
        raise ValueError(f"invalid placements list: {text!r}")


def _parse_channels(text: str):
    try:
        channels = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise ValueError(f"invalid channel list: {text!r}")
    if not channels:
        raise ValueError("channel list is empty")
    return channels


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    gt_dir, pred_dir = Path(args.gt), Path(args.pred)
    if not gt_dir.is_dir():
        return _fail(f"ground-truth directory not found: {gt_dir}")
    if not pred_dir.is_dir():
        return _fail(f"prediction directory not found: {pred_dir}")
    gt_files = sorted(gt_dir.glob("*.txt"))
    # every prediction file needs a ground-truth mate; images with no
    # prediction file simply score zero detections
    for p in sorted(pred_dir.glob("*.txt")):
        if not (gt_dir / p.name).exists():
            return _fail(f"missing counterpart file: {gt_dir / p.name}")
    gts, preds = [], []
    for g in gt_files:
        image_id = g.stem
        try:
            gts.extend(D.parse_yolo_label_file(g.read_text(), image_id))
        except ValueError as e:
            return _fail(f"{g}: {e}")
        mate = pred_dir / g.name
        if mate.exists():
            try:
                preds.extend(D.parse_prediction_file(mate.read_text(),
                                                     image_id))
            except ValueError as e:
                return _fail(f"{mate}: {e}")
    report = eval_report(preds, gts, D.CLASS_CODES,
                         iou_threshold=args.iou, conf_threshold=args.conf)
    text = report_to_text(report)
    print(text, end="")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_to_json(report))
    out.with_suffix(".txt").write_text(text)
    F.save_pr_curves(preds, gts, D.CLASS_CODES,
                     out.with_name(out.stem + "_pr.png"), args.iou)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _grad_errors(loss_fn, named, h=1e-5):
    """Analytic gradients against central differences, per tensor."""
    for _, p in named:
        p.zero_grad()
    loss_fn().backward()
    grads = [(name, p, p.grad.copy() if p.grad is not None
              else np.zeros(p.shape)) for name, p in named]
    out = []
    with T.no_grad():
        for name, p, grad in grads:
            worst = 0.0
            for k in range(p.size):
                orig = p.data.flat[k]
                p.data.flat[k] = orig + h
                up = loss_fn().item()
                p.data.flat[k] = orig - h
                down = loss_fn().item()
                p.data.flat[k] = orig
                num = (up - down) / (2 * h)
                ana = grad.flat[k]
                worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
            out.append((name, worst))
    return out


def cmd_gradcheck(args) -> int:
    try:
        shape = tuple(int(tok) for tok in args.shape.split(","))
    except ValueError:
        return _fail(f"invalid shape: {args.shape!r}")
    if len(shape) != 4:
        return _fail(f"shape must be B,C,H,W, got {args.shape!r}")
    bsz, ch, hh, ww = shape
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=shape)

    acfg = B.AttentionConfig(ch, B.heads_from_channels(ch), args.attn_ratio)
    ab = B.init_attention_params(acfg, rng)
    psa = B.init_psa_params(ch, args.attn_ratio, rng)

    groups = []
    for prefix, params, fwd in (
        ("ab", ab, lambda p: B.attention_block_forward(
            Tensor(x), p, training=True)),
        ("psa", psa, lambda p: B.psa_forward(Tensor(x), p, training=True)),
    ):
        named = [(n, t) for n, t in params.named_tensors(prefix)
                 if not n.endswith(("running_mean", "running_var"))]
        groups.extend(_grad_errors(lambda: fwd(params).sum(), named))

    if args.corrupt:  # negative-control hook: misreport one gradient
        name, err = groups[0]
        groups[0] = (name, err + 1.0)

    failed = None
    for name, err in groups:
        status = "ok" if err < args.tolerance else "FAIL"
        print(f"{name:<28} max rel err {err:.3e}  {status}")
        if err >= args.tolerance and failed is None:
            failed = (name, err)
    if failed:
        print(f"gradient check failed: {failed[0]} "
              f"(max rel err {failed[1]:.3e} >= {args.tolerance:g})",
              file=sys.stderr)
        return 1
    print(f"all {len(groups)} parameter groups below {args.tolerance:g}")
    return 0


# ---------------------------------------------------------------------------
# train-toy
# ---------------------------------------------------------------------------

def _synth_split(n, size, seed):
    images, ann = D.synth_generate(n, size, seed)
    ids = list(ann.entries)
    manifest = D.split_dataset(ids, seed)
    by_id = dict(zip(ids, images))
    def subset(chosen):
        imgs = [by_id[i] for i in chosen]
        targets = [list(ann.entries[i][1]) for i in chosen]
        return imgs, targets
    return manifest, subset


def _report_split(model, images, targets, names, conf, iou, out_json):
    import dataclasses
    image_ids = [f"i{k}" for k in range(len(images))]
    gts = [dataclasses.replace(b, image_id=image_ids[k])
           for k, boxes in enumerate(targets) for b in boxes]
    preds = N.predict(model, images, conf_threshold=0.001,
                      image_ids=image_ids)
    report = eval_report(preds, gts, names, iou_threshold=iou,
                         conf_threshold=conf)
    out_json.write_text(report_to_json(report))
    out_json.with_suffix(".txt").write_text(report_to_text(report))
    F.save_pr_curves(preds, gts, names,
                     out_json.with_name(out_json.stem + "_pr.png"), iou)
    return report


def cmd_train_toy(args) -> int:
    placements = _parse_placements(args.placements)
    cfg = N.ModelConfig(input_size=args.size, psa_placements=placements,
                        attn_ratio=args.attn_ratio)
    manifest, subset = _synth_split(args.n, args.size, args.seed)
    train_imgs, train_targets = subset(manifest.train)
    held_imgs, held_targets = subset(manifest.val)

    model = N.build_toy_net(cfg, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_csv = out.parent / "train_log.csv"
    log, best = N.train_toy(model, train_imgs, train_targets,
                            epochs=args.epochs, lr=args.lr,
                            momentum=args.momentum,
                            batch_size=args.batch_size, seed=args.seed,
                            log_path=log_csv)
    N.save_checkpoint(model, out)
    if log:
        F.save_training_curves(log, out.parent / "training_curves.png", best)
        print(f"best epoch {best}: train mAP50 {log[best][2]:.4f}")
    train_rep = _report_split(model, train_imgs, train_targets,
                              D.CLASS_CODES, args.conf, args.iou,
                              out.parent / "train_report.json")
    held_rep = _report_split(model, held_imgs, held_targets,
                             D.CLASS_CODES, args.conf, args.iou,
                             out.parent / "holdout_report.json")
    (out.parent / "split.json").write_text(D.manifest_to_json(manifest))
    print(f"train split mAP50 {train_rep.map50:.4f}  "
          f"holdout mAP50 {held_rep.map50:.4f}")
    print(f"checkpoint: {out}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATE_CONFIGS = (
    ("no-PSA", frozenset(), 0.5),
    ("single-PSA", frozenset({2}), 0.5),
    ("all-stage-PSA", frozenset({0, 1, 2}), 0.5),
    ("R=1.0", frozenset({2}), 1.0),
)


def run_ablation(n, size, epochs, seed, conf=0.25, iou=0.5,
                 lr=0.1, momentum=0.9, batch_size=8):
    """Train the four canonical configurations on one shared dataset."""
    manifest, subset = _synth_split(n, size, seed)
    train_imgs, train_targets = subset(manifest.train)
    import dataclasses
    image_ids = [f"i{k}" for k in range(len(train_imgs))]
    gts = [dataclasses.replace(b, image_id=image_ids[k])
           for k, boxes in enumerate(train_targets) for b in boxes]
    rows = []
    for label, placements, ratio in ABLATE_CONFIGS:
        cfg = N.ModelConfig(input_size=size, psa_placements=placements,
                            attn_ratio=ratio)
        model = N.build_toy_net(cfg, seed=seed)
        N.train_toy(model, train_imgs, train_targets, epochs=epochs,
                    lr=lr, momentum=momentum, batch_size=batch_size,
                    seed=seed)
        preds = N.predict(model, train_imgs, conf_threshold=0.001,
                          image_ids=image_ids)
        rep = eval_report(preds, gts, D.CLASS_CODES, iou_threshold=iou,
                          conf_threshold=conf)
        rows.append({"config": label, "map50": round(rep.map50, 6),
                     "f1": round(rep.f1, 6),
                     "flops": N.flops_estimate(cfg).total})
    return rows


def _ablate_text(rows, seed) -> str:
    lines = [f"# ablation (data seed {seed})",
             f"{'Config':<15} {'mAP50':>8} {'F1':>8} {'FLOPs':>12}"]
    for r in rows:
        lines.append(f"{r['config']:<15} {r['map50']:>8.4f} "
                     f"{r['f1']:>8.4f} {r['flops']:>12}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    rows = run_ablation(args.n, args.size, args.epochs, args.seed,
                        conf=args.conf, iou=args.iou)
    text = _ablate_text(rows, args.seed)
    print(text, end="")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablate.json").write_text(json.dumps(
        {"seed": args.seed, "rows": rows}, indent=2) + "\n")
    (out / "ablate.txt").write_text(text)
    F.save_ablation_chart(rows, out / "ablation.png")
    return 0


# ---------------------------------------------------------------------------
# bench / flops / featmap
# ---------------------------------------------------------------------------

def _load_model(ckpt, seed=0):
    if ckpt is None:
        return N.build_toy_net(N.ModelConfig(), seed=seed), "default"
    path = Path(ckpt)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return N.load_checkpoint(path), path.stem


def cmd_bench(args) -> int:
    model, label = _load_model(args.ckpt)
    if args.images is not None:
        img_dir = Path(args.images)
        paths = sorted(img_dir.glob("*.ppm"))
        if not paths:
            return _fail(f"no .ppm images under {img_dir}")
        images = list(paths)
    else:
        images, _ = D.synth_generate(4, model.cfg.input_size, seed=0)
    bd = measure_fps(model, images, warmup=args.warmup, iters=args.iters)
    text, rows = bench_report(
        [bd], [label], [model.param_count()],
        [N.flops_estimate(model.cfg).total])
    print(text, end="")
    print(f"phases: pre {bd.t_pre * 1e3:.3f} ms, "
          f"inference {bd.t_inference * 1e3:.3f} ms, "
          f"post {bd.t_post * 1e3:.3f} ms")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.json").write_text(json.dumps(rows, indent=2) + "\n")
        (out / "bench.txt").write_text(text)
        F.save_bench_chart(rows, out / "bench.png")
    return 0


def cmd_flops(args) -> int:
    cfg = N.ModelConfig(input_size=args.input_size,
                        stage_channels=_parse_channels(args.channels),
                        psa_placements=_parse_placements(args.placements),
                        attn_ratio=args.attn_ratio)
    rep = N.flops_estimate(cfg)
    for name, f in rep.entries:
        print(f"{name:<22} {f:>12}")
    print(f"{'total':<22} {rep.total:>12}")
    return 0


def cmd_featmap(args) -> int:
    model, _ = _load_model(args.ckpt)
    cfg = model.cfg
    if args.stage not in cfg.psa_placements:
        return _fail(f"no PSA at stage {args.stage}")
    if args.image is not None:
        path = Path(args.image)
        if not path.exists():
            return _fail(f"image not found: {path}")
        img = D.load_image_ppm(path)
    else:
        imgs, _ = D.synth_generate(1, cfg.input_size, seed=0)
        img = imgs[0]
    taps = {}
    with T.no_grad():
        N.forward(model, Tensor(img.data[None]), collect=taps)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for tag in ("pre_psa", "post_psa"):
        fm = taps[f"stage{args.stage}.{tag}"]
        base = Path(f"{prefix}_{tag}")
        written += D.featuremap_dump(fm, base)
        F.save_featuremap_grid(fm, base.with_suffix(".png"))
    print(f"wrote {len(written)} maps and 2 charts with prefix {prefix}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pavedet",
        description="pavement damage detection toolkit (toy scale)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction label directory")
    p.add_argument("--gt", required=True, help="ground-truth label directory")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", default="2,32,4,4")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--attn-ratio", type=float, default=0.5)
    p.add_argument("--corrupt", action="store_true",
                   help="test hook: misreport one gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on synthetic data")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--placements", default="2")
    p.add_argument("--attn-ratio", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default="out/model.pvd")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate", help="train the four canonical configs")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--out", default="out/ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="time inference phases")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--images", default=None, help="directory of .ppm images")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", help="per-layer analytic FLOPs")
    p.add_argument("--placements", default="2")
    p.add_argument("--attn-ratio", type=float, default=0.5)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--channels", default="16,32,64")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("featmap", help="dump maps around one PSA block")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--image", default=None, help="input .ppm")
    p.add_argument("--stage", type=int, default=2)
    p.add_argument("--out", default="out/featmap")
    p.set_defaults(func=cmd_featmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if hasattr(args, "seed") and "PAVEDET_SEED" in os.environ:
        try:
            args.seed = int(os.environ["PAVEDET_SEED"])
        except ValueError:
            return _fail(f"PAVEDET_SEED is not an integer: "
                         f"{os.environ['PAVEDET_SEED']!r}")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError) as e:
        return _fail(str(e))


if __name__ == "__main__":
    sys.exit(main())
