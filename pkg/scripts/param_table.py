"""Parameter and FLOP totals for the presets, plus the depth-wise kernel calibration sweep."""
from dataclasses import replace

from tcformer.complexity import flop_count, param_count
from tcformer.model import preset

TARGET_PARAMS = 25.6e6
TARGET_GFLOPS = 5.9


def main():
    print("preset  head    params(M)  GFLOPs(MAC)  GFLOPs(2xMAC)")
    for name in ("light", "base", "large"):
        for head in ("cls", "mta"):
            cfg = preset(name, head=head)
            print(f"{name:7s} {head:6s} {param_count(cfg) / 1e6:9.2f}  {flop_count(cfg) / 1e9:11.2f}"
                  f"  {flop_count(cfg, multiply_adds=False) / 1e9:13.2f}")
    print("\ndepth-wise kernel sweep, base preset, classification head")
    base = preset("base", head="cls")
    for k in (3, 5, 7):
        stages = tuple(replace(s, block=replace(s.block, dw_kernel=k)) for s in base.stages)
        cfg = replace(base, stages=stages)
        p = param_count(cfg)
        f = flop_count(cfg) / 1e9
        print(f"k={k}: {p:,d} params ({100 * (p / TARGET_PARAMS - 1):+.2f}%), "
              f"{f:.2f} GFLOPs ({100 * (f / TARGET_GFLOPS - 1):+.1f}%)")


if __name__ == "__main__":
    main()
