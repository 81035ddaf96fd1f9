"""Command-line entry point.

Exit codes: 0 success, 2 input/config error, 3 missing artifact,
4 numeric failure (divergence or failed gradient check).
"""
import argparse
import csv
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _read_points(path):
    if not os.path.exists(path):
        raise CliError(f"{path}: no such file", EXIT_MISSING)
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise CliError(f"{path}: empty file (expected a header row)")
        for row in reader:
            if not row:
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise CliError(f"{path}: line {reader.line_num}: non-numeric value") from None
            if len(values) != len(header) or not all(np.isfinite(values)):
                raise CliError(f"{path}: line {reader.line_num}: expected {len(header)} finite values")
            rows.append(values)
    if len(rows) < 2:
        raise CliError(f"{path}: need at least 2 points")
    return np.array(rows)


def cmd_cluster(args):
    from .dpc_knn import cluster
    from .errors import InvalidInput

    points = _read_points(args.points)
    try:
        res = cluster(points, args.clusters, args.k)
    except InvalidInput as e:
        raise CliError(str(e)) from None
    centers = set(res.centers.tolist())
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["point_index", "cluster_id", "density", "indicator", "score", "is_center"])
        for i in range(len(points)):
            w.writerow([i, int(res.assignment[i]), repr(float(res.density[i])), repr(float(res.indicator[i])),
                        repr(float(res.score[i])), int(i in centers)])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _run_config(args):
    from . import runconfig

    if args.config:
        if not os.path.exists(args.config):
            raise CliError(f"{args.config}: no such config file", EXIT_MISSING)
        cfg = runconfig.load(args.config)
    else:
        cfg = runconfig.RunConfig()
    return runconfig.apply_overrides(
        cfg, seed=args.seed, out=getattr(args, "out", None), preset_name=getattr(args, "preset", None),
        head=getattr(args, "head", None), ctm=getattr(args, "ctm", None),
    )


def cmd_train(args):
    import torch

    from . import runconfig
    from .checkpoint import save_checkpoint
    from .harness.data import generate_dataset
    from .harness.metrics import evaluate_pck
    from .harness.report import plot_loss_png, write_loss_csv
    from .harness.train import train

    cfg = _run_config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    model_cfg = cfg.model_config()
    opt_cfg = cfg.optimizer_config()
    torch.set_num_threads(1)
    os.makedirs(cfg.output, exist_ok=True)
    with open(os.path.join(cfg.output, "config.yaml"), "w") as f:
        f.write(runconfig.dump(cfg))
    data = generate_dataset(cfg.data.seed, cfg.data.count, cfg.data.resolution)
    log = open(os.path.join(cfg.output, "run.log"), "w")

    def on_step(step, loss):
        if step % 25 == 0 or step == opt_cfg.steps - 1:
            log.write(json.dumps({"event": "step", "step": step, "loss": loss}) + "\n")

    try:
        result = train(model_cfg, data, opt_cfg, on_step=on_step)
    finally:
        log.close()
    write_loss_csv(os.path.join(cfg.output, "loss_curve.csv"), result.losses)
    plot_loss_png(os.path.join(cfg.output, "loss_curve.png"), result.losses)
    meta = {"final_loss": result.losses[-1] if result.losses else None, "steps": opt_cfg.steps}
    if cfg.data.eval_count and model_cfg.head != "cls":
        held_out = generate_dataset(cfg.data.eval_seed, cfg.data.eval_count, cfg.data.resolution)
        meta["pck@0.1"] = evaluate_pck(result.model, held_out, 0.1)
    save_checkpoint(os.path.join(cfg.output, "checkpoint.tcf"), result.model, meta)
    with open(os.path.join(cfg.output, "run.log"), "a") as f:
        f.write(json.dumps({"event": "done", "seconds": result.seconds, **meta}) + "\n")
    print(json.dumps({**meta, "seconds": result.seconds}))
    return EXIT_OK


def _load(path):
    from .checkpoint import CheckpointError, load_checkpoint

    if not os.path.exists(path):
        raise CliError(f"{path}: checkpoint not found", EXIT_MISSING)
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise CliError(str(e)) from None


def cmd_eval(args):
    from .harness.data import generate_dataset
    from .harness.metrics import pck_from_heatmaps, predict_heatmaps, token_density_report

    cfg = _run_config(args)
    data = generate_dataset(cfg.data.eval_seed if args.seed is None else args.seed,
                            args.count or cfg.data.eval_count, cfg.data.resolution)
    report = {"samples": len(data), "threshold": args.threshold}
    if args.use_targets:
        heatmaps = np.stack([s.target_heatmaps for s in data])
        report["pck"] = pck_from_heatmaps(heatmaps, data, args.threshold)
    else:
        model, _ = _load(args.checkpoint)
        if model.cfg.input_resolution != (cfg.data.resolution,) * 2:
            data = generate_dataset(cfg.data.eval_seed if args.seed is None else args.seed,
                                    len(data), model.cfg.input_resolution[0])
        report["pck"] = pck_from_heatmaps(predict_heatmaps(model, data), data, args.threshold)
        report["token_density"] = token_density_report(model, data)
    print(json.dumps(report))
    return EXIT_OK


def cmd_visualize(args):
    import torch

    from .harness.data import generate_dataset
    from .viz import composite_strip, save_png, stage_overlays

    model, _ = _load(args.checkpoint)
    size = model.cfg.input_resolution
    if args.image:
        from PIL import Image

        if not os.path.exists(args.image):
            raise CliError(f"{args.image}: image not found", EXIT_MISSING)
        img = Image.open(args.image).convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
        image = np.asarray(img, dtype=np.float64) / 255.0
    else:
        image = generate_dataset(args.seed or 0, 1, size[0])[0].image
    with torch.no_grad():
        x = torch.as_tensor(image, dtype=torch.float32).permute(2, 0, 1)[None]
        out = model(x)
    overlays = stage_overlays(image, [t.region_map[0].numpy() for t in out.stage_tokens])
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for s, ov in enumerate(overlays, start=1):
        p = os.path.join(args.out, f"stage{s}.png")
        save_png(ov, p, scale=args.scale)
        paths.append(p)
    strip = os.path.join(args.out, "strip.png")
    save_png(composite_strip(image, overlays), strip, scale=args.scale)
    print(json.dumps({"stages": paths, "strip": strip}))
    return EXIT_OK


def cmd_params(args):
    from .complexity import flop_breakdown, param_breakdown
    from .model import mini_config, preset

    name = args.preset or "base"
    res = (args.resolution, args.resolution)
    head = args.head or "cls"
    reducer = args.ctm or "dpcknn"
    if name == "mini":
        cfg = mini_config(head=head, reducer=reducer, input_resolution=res)
    else:
        cfg = preset(name, head=head, reducer=reducer, input_resolution=res)
    params = param_breakdown(cfg)
    flops = flop_breakdown(cfg)
    names = list(dict.fromkeys([*params, *flops]))
    w = csv.writer(sys.stdout)
    w.writerow(["module", "params", "flops"])
    for n in names:
        w.writerow([n, params.get(n, 0), flops.get(n, 0)])
    w.writerow(["total", sum(params.values()), sum(flops.values())])
    return EXIT_OK


def cmd_gradcheck(args):
    from .harness.gradcheck import MODULE_CHECKS, check_module

    names = list(MODULE_CHECKS) if args.module == "all" else [args.module]
    if args.module != "all" and args.module not in MODULE_CHECKS:
        raise CliError(f"unknown module {args.module!r}; choose from {sorted(MODULE_CHECKS)} or 'all'")
    if args.module == "all":
        names.remove("corrupted")
    ok = True
    for n in names:
        r = check_module(n, seed=args.seed or 0)
        print(f"{n}: max_rel_error={r.max_rel_error:.3e} {'PASS' if r.passed else 'FAIL'}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="tcformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out")
        sp.add_argument("--preset", choices=["mini", "light", "base", "large"])
        sp.add_argument("--head", choices=["mta", "deconv", "cls"])
        sp.add_argument("--ctm", choices=["dpcknn", "topk", "strided"])

    sp = sub.add_parser("cluster", help="DPC-KNN on a CSV of points")
    sp.add_argument("points")
    sp.add_argument("--clusters", "-m", type=int, required=True)
    sp.add_argument("--k", type=int, default=5)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cluster)

    sp = sub.add_parser("train", help="train on the synthetic keypoint task")
    common(sp)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="PCK of a checkpoint on synthetic data")
    sp.add_argument("checkpoint", nargs="?", default="")
    common(sp, out=False)
    sp.add_argument("--count", type=int)
    sp.add_argument("--threshold", type=float, default=0.1)
    sp.add_argument("--use-targets", action="store_true", help="score the ground-truth heatmaps instead")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("visualize", help="per-stage token region overlays")
    sp.add_argument("checkpoint")
    sp.add_argument("--image")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, default=4)
    sp.set_defaults(func=cmd_visualize)

    sp = sub.add_parser("params", help="parameter and FLOP table")
    common(sp, out=False)
    sp.add_argument("--resolution", type=int, default=224)
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check")
    sp.add_argument("module")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    from .errors import InvalidConfig, InvalidInput, TrainingDiverged

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_INPUT
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (InvalidConfig, InvalidInput) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDiverged as e:
        print(f"error: {e} {json.dumps(e.diagnostics)}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
