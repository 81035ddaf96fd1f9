"""Share of forward time spent clustering and merging tokens, base preset at 224x224."""
import argparse
import time

import torch

from tcformer.model import build_model, preset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--preset", default="base", choices=["light", "base", "large"])
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    torch.set_num_threads(args.threads)
    model = build_model(preset(args.preset, head="cls"), seed=0).eval()
    x = torch.rand(args.batch, 3, 224, 224, generator=torch.Generator().manual_seed(0))
    fractions = []
    with torch.no_grad():
        model(x)  # warm-up
        for _ in range(args.repeats):
            start = time.perf_counter()
            model(x)
            total = time.perf_counter() - start
            cluster = sum(r.last_cluster_seconds for r in model.reducers)
            fractions.append(cluster / total)
            print(f"forward {total:.3f}s  cluster+merge {cluster:.3f}s  ({100 * cluster / total:.1f}%)")
    fractions.sort()
    print(f"median cluster+merge share: {100 * fractions[len(fractions) // 2]:.1f}%")


if __name__ == "__main__":
    main()
