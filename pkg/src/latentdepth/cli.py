"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime/data error,
3 verification failure. Every subcommand writes a JSON result to --out
and a human-readable summary to stdout.
"""

import argparse
import json
import os
import sys


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_size(text):
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise UsageError("--size must be HxW, got %r" % text)
    if h % 16 != 0 or w % 16 != 0:
        raise UsageError("--size dims must be divisible by 16, got %s" % text)
    return h, w


def _write_json(path, payload):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _apply_thread_cap():
    cap = os.environ.get("LATENT_DEPTH_THREADS")
    if cap is None:
        return
    try:
        n = int(cap)
    except ValueError:
        raise UsageError("LATENT_DEPTH_THREADS must be an integer")
    if n < 0:
        raise UsageError("LATENT_DEPTH_THREADS must be >= 0")
    if n > 0:  # 0 = auto; must be set before numpy loads its BLAS
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _build_parser():
    top = _Parser(prog="latentdepth",
                  description="Monocular depth estimation with a guided "
                              "latent-feature loss")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic RGB-D dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", required=True, help="HxW, divisible by 16")
    p.add_argument("--objects", type=int, default=2)
    p.add_argument("--per-scene", type=int, default=8,
                   help="images sharing one scene id")
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out", required=True, help="JSON result path")

    for stage in ("train-guided", "train-color"):
        p = sub.add_parser(stage)
        p.add_argument("--manifest", required=True)
        p.add_argument("--steps", type=int, required=True)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--momentum", type=float, default=0.9)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--base-width", type=int, default=4)
        p.add_argument("--bottleneck-blocks", type=int, default=6)
        p.add_argument("--size", required=True, help="HxW after preprocessing")
        p.add_argument("--ckpt-out", required=True)
        p.add_argument("--loss-csv", default=None)
        p.add_argument("--out", required=True)
        if stage == "train-color":
            p.add_argument("--guided", required=True,
                           help="frozen guided-network checkpoint")
            p.add_argument("--w-data", type=float, default=1.0)
            p.add_argument("--w-latent", type=float, default=1.0)
            p.add_argument("--w-grad-image", type=float, default=1.0)
            p.add_argument("--w-grad-feature", type=float, default=1.0)
            p.add_argument("--layers", default=None,
                           help="comma-separated tap indices (default all)")

    p = sub.add_parser("eval")
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["test", "train",
                                                       "all"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict")
    p.add_argument("--model", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth-out", required=True,
                   help="output 16-bit PGM depth map (millimeters)")
    p.add_argument("--out", required=True, help="JSON result path")

    p = sub.add_parser("gradcheck")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", default="tiny", choices=["tiny"])
    p.add_argument("--out", required=True)

    p = sub.add_parser("report")
    p.add_argument("--table2", action="store_true", required=True)
    p.add_argument("--ours", type=float, default=None)
    p.add_argument("--out", required=True)
    return top


# ---------------------------------------------------------------------------
# subcommands (heavy imports deferred until after the thread cap is set)

def _cmd_gen_synth(args):
    from . import data

    if args.count < 1 or args.objects < 1 or args.per_scene < 1:
        raise UsageError("--count, --objects and --per-scene must be >= 1")
    h, w = _parse_size(args.size)
    os.makedirs(args.out_dir, exist_ok=True)
    records = []
    n_test = int(round(args.count * args.test_fraction))
    for i in range(args.count):
        sample = data.synth_scene(args.seed * 100003 + i, h, w, args.objects)
        rgb_path = os.path.join(args.out_dir, "synth_%04d.ppm" % i)
        depth_path = os.path.join(args.out_dir, "synth_%04d.pgm" % i)
        data.save_rgbd_pair(sample, rgb_path, depth_path)
        records.append(data.ManifestRecord(
            rgb_path, depth_path,
            scene_id="scene%03d" % (i // args.per_scene),
            split="test" if i >= args.count - n_test else "train"))
    manifest_path = os.path.join(args.out_dir, "manifest.json")
    data.save_manifest(manifest_path, records, relative_to=args.out_dir)
    result = {"count": args.count, "manifest": manifest_path,
              "size": [h, w], "seed": args.seed}
    _write_json(args.out, result)
    print("wrote %d synthetic pairs to %s" % (args.count, args.out_dir))
    return 0


def _load_samples(manifest_path, h, w, split=None):
    from . import data

    records = data.load_manifest(manifest_path)
    if split and split != "all":
        records = [r for r in records if r.split == split]
    samples = []
    for rec in records:
        s = data.load_rgbd_pair(rec.rgb_path, rec.depth_path, rec.scene_id)
        samples.append(data.preprocess(s, h, w))
    return samples


def _cmd_train(args, stage):
    from . import losses, training
    from .network import NetworkConfig, load_checkpoint

    h, w = _parse_size(args.size)
    in_ch = 1 if stage == "guided" else 3
    net = NetworkConfig(input_channels=in_ch, output_channels=1,
                        base_width=args.base_width,
                        bottleneck_blocks=args.bottleneck_blocks,
                        input_h=h, input_w=w)
    if stage == "color":
        weights = losses.LossWeights(data=args.w_data, latent=args.w_latent,
                                     grad_image=args.w_grad_image,
                                     grad_feature=args.w_grad_feature)
        layers = tuple(int(t) for t in args.layers.split(",")) \
            if args.layers else None
    else:
        weights = losses.LossWeights()
        layers = None
    config = training.TrainConfig(
        stage=stage, net=net, steps=args.steps, batch_size=args.batch_size,
        learning_rate=args.lr, momentum=args.momentum, seed=args.seed,
        weights=weights, latent_layers=layers,
        checkpoint_path=args.ckpt_out, loss_csv_path=args.loss_csv)
    samples = _load_samples(args.manifest, h, w, split="train")
    if stage == "guided":
        model, history = training.train_guided(config, samples)
    else:
        guided = load_checkpoint(args.guided)
        model, history = training.train_color(config, samples, guided)
    final = history[-1].total if history else None
    result = {"stage": stage, "steps": args.steps, "seed": args.seed,
              "batch_size": args.batch_size, "learning_rate": args.lr,
              "momentum": args.momentum, "size": [h, w],
              "base_width": args.base_width,
              "final_loss": final, "checkpoint": args.ckpt_out,
              "loss_csv": args.loss_csv}
    _write_json(args.out, result)
    print("trained %s network for %d steps; final loss %s"
          % (stage, args.steps, final))
    return 0


def _cmd_eval(args):
    from . import training
    from .network import load_checkpoint

    model = load_checkpoint(args.model)
    samples = _load_samples(args.manifest, model.config.input_h,
                            model.config.input_w, split=args.split)
    result = training.evaluate(model, samples)
    _write_json(args.out, {"rmse": result.rmse,
                           "n_valid_pixels": result.n_valid_pixels,
                           "n_images": result.n_images})
    print(result.summary())
    return 0


def _cmd_predict(args):
    import numpy as np

    from . import data
    from .autodiff import ShapeMismatchError, Tensor, no_grad
    from .network import load_checkpoint

    model = load_checkpoint(args.model)
    rgb_raw = data.read_ppm(args.rgb)
    rgb = rgb_raw.astype(float).transpose(2, 0, 1) / 255.0
    expect = (model.config.input_channels, model.config.input_h,
              model.config.input_w)
    if rgb.shape != expect:
        raise ShapeMismatchError("input image is %s but model expects %s"
                                 % (rgb.shape, expect))
    model.eval()
    with no_grad():
        pred, _ = model.forward(Tensor(rgb))
    mm = np.clip(np.rint(pred.data[0] * 1000.0), 0, 65535).astype(np.uint16)
    data.write_pgm16(args.depth_out, mm)
    _write_json(args.out, {"depth_map": args.depth_out,
                           "min_m": float(pred.data.min()),
                           "max_m": float(pred.data.max())})
    print("wrote depth map %s" % args.depth_out)
    return 0


def _cmd_gradcheck(args):
    from . import verify

    checks = verify.run_gradient_checks(seed=args.seed)
    ok = all(c["passed"] for c in checks)
    _write_json(args.out, {"tolerance": verify.TOLERANCE, "seed": args.seed,
                           "passed": ok, "checks": checks})
    for c in checks:
        print("%-28s %-4s max rel err %.3e"
              % (c["name"], "ok" if c["passed"] else "FAIL",
                 c["max_rel_error"]))
    if not ok:
        failing = [c for c in checks if not c["passed"]]
        print("gradcheck FAILED: " + ", ".join(
            "%s (%.3e)" % (c["name"], c["max_rel_error"]) for c in failing))
        return 3
    print("gradcheck passed: %d checks" % len(checks))
    return 0


def _cmd_report(args):
    from . import metrics

    ours = args.ours if args.ours is not None else metrics.TABLE2_OURS
    rows = []
    for name, baseline in metrics.TABLE2_BASELINES.items():
        imp = metrics.relative_improvement(baseline, ours)
        rows.append({"baseline": name, "baseline_rmse": baseline,
                     "ours_rmse": ours, "improvement_pct": imp})
        print("%-16s RMSE %.3f -> ours %.3f: %.2f%% improvement"
              % (name, baseline, ours, imp))
    _write_json(args.out, {"rows": rows})
    return 0


def main(argv=None):
    try:
        _apply_thread_cap()
        args = _build_parser().parse_args(argv)
        if args.command == "gen-synth":
            return _cmd_gen_synth(args)
        if args.command == "train-guided":
            return _cmd_train(args, "guided")
        if args.command == "train-color":
            return _cmd_train(args, "color")
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "report":
            return _cmd_report(args)
        raise UsageError("unknown command %r" % args.command)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
