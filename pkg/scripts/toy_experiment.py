"""Train the mini model on the synthetic keypoint task and report the diagnostics.

    python scripts/toy_experiment.py --reducers dpcknn strided --out runs/toy
"""
import argparse
import json
import os

import numpy as np
import torch

from tcformer.harness.data import generate_dataset
from tcformer.harness.metrics import evaluate_pck, token_density_report
from tcformer.harness.report import plot_loss_png, write_loss_csv
from tcformer.harness.train import OptimizerConfig, smoothed, train
from tcformer.model import mini_config


def run(reducer, head, steps, seed, out):
    train_set = generate_dataset(seed, 500)
    held_out = generate_dataset(seed + 1, 100)
    cfg = mini_config(reducer=reducer, head=head)
    res = train(cfg, train_set, OptimizerConfig(steps=steps, seed=seed))
    curve = smoothed(res.losses)
    rise = np.diff(curve)
    row = {
        "reducer": reducer,
        "head": head,
        "steps": steps,
        "seconds": round(res.seconds, 1),
        "final_smoothed_loss": float(curve[-1]) if len(curve) else None,
        "monotone": bool(np.all(rise <= 0)),
        "largest_rise": float(rise.max()) if len(rise) else 0.0,
        "pck@0.1": evaluate_pck(res.model, held_out, 0.1),
        **token_density_report(res.model, held_out),
    }
    tag = f"{reducer}_{head}"
    write_loss_csv(os.path.join(out, f"loss_{tag}.csv"), res.losses)
    plot_loss_png(os.path.join(out, f"loss_{tag}.png"), res.losses)
    return row


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reducers", nargs="+", default=["dpcknn", "strided"])
    p.add_argument("--head", default="mta", choices=["mta", "deconv"])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/toy")
    args = p.parse_args()
    torch.set_num_threads(1)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for r in args.reducers:
        rows.append(run(r, args.head, args.steps, args.seed, args.out))
        print(json.dumps(rows[-1]), flush=True)
    with open(os.path.join(args.out, "summary.json"), "w") as f:
        json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
