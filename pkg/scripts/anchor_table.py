"""Anchor scales and branch assignment for the common dataset settings.

    python3 scripts/anchor_table.py
"""
from mhn.anchors import CALTECH_RATIO, KITTI_RATIO, AnchorConfig, format_scale_table, make_anchor_set

SETTINGS = {
    "caltech, 9 anchors": AnchorConfig(30, 480, 9, CALTECH_RATIO, (3, 3, 3)),
    "kitti, 12 anchors": AnchorConfig(30, 480, 12, KITTI_RATIO, (4, 4, 4)),
}


def main():
    for name, cfg in SETTINGS.items():
        print(f"## {name}")
        print(format_scale_table(make_anchor_set(cfg)))
        print()


if __name__ == "__main__":
    main()
