"""Print stride / receptive field / depth tables for all three builders.

Also prints the receptive field lost by dropping pool(i-2) in the dilated
variant, per branch.

    python3 scripts/branch_tables.py [--backbone vgg16|toy]
"""
import argparse

from mhn.archgraph import BRANCHES, branch_report, format_report, infer_signatures
from mhn.builders import ARCHITECTURES, build, toy_backbone, vgg16_backbone


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--backbone", choices=("vgg16", "toy"), default="vgg16")
    args = ap.parse_args()
    b = vgg16_backbone() if args.backbone == "vgg16" else toy_backbone()
    graphs = {arch: build(arch, b) for arch in ARCHITECTURES}
    for arch, g in graphs.items():
        print(f"## {arch}")
        print(format_report(branch_report(g, BRANCHES)))
        print()
    plain, dil = (infer_signatures(graphs[a]) for a in ("mhn", "mhn-d"))
    print("## rf change from mhn to mhn-d")
    for br in BRANCHES:
        p = plain[graphs["mhn"].resolve(br)]
        d = dil[graphs["mhn-d"].resolve(br)]
        print(f"{br:7s} stride {p.stride:>3d} -> {d.stride:<3d} rf {p.rf[0]:>4d} -> {d.rf[0]:<4d} ({d.rf[0] - p.rf[0]:+d})")


if __name__ == "__main__":
    main()
