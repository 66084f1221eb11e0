"""The four circle-scribble strategies on a corpus of lesion cross-sections.

Prints how much of the lesion area each strategy annotates and calibrates the
two erosion presets (10% and 14% coverage) on one corpus before checking them
on a fresh one. With ``--plot out.png`` a few lesions are drawn with their
scribbles.

    python demos/02_scribbles.py [--plot scribbles.png]
"""

import argparse

import numpy as np

from weakseg.annotate import (ScribbleConfig, calibrate_erosion_area, scribble_center_distmap,
                              scribble_erosion, scribble_random_distmap, scribble_random_valid)
from weakseg.synth import lesion_slice_corpus


def coverage(masks, scribbles):
    return sum(int((s & m).sum()) for s, m in zip(scribbles, masks)) / sum(int(m.sum()) for m in masks)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--plot", help="save an illustration to this path")
    args = ap.parse_args()

    lesions = lesion_slice_corpus(300, seed=0)
    areas = np.array([m.sum() for m in lesions])
    print(f"{len(lesions)} lesion slices, area median {np.median(areas):.0f}, "
          f"90th percentile {np.percentile(areas, 90):.0f} voxels")

    cfg = ScribbleConfig()
    rng = np.random.default_rng(0)
    strategies = {
        "random_valid": [scribble_random_valid(m, cfg, rng) for m in lesions],
        "center_distmap": [scribble_center_distmap(m, cfg) for m in lesions],
        "random_distmap": [scribble_random_distmap(m, cfg, rng) & m for m in lesions],
    }
    fresh = lesion_slice_corpus(300, seed=1)
    for target in (0.10, 0.14):
        area = calibrate_erosion_area(lesions, target)
        strategies[f"erosion {target:.0%}"] = [scribble_erosion(m, area) for m in lesions]
        held = coverage(fresh, [scribble_erosion(m, area) for m in fresh])
        print(f"erosion preset {target:.0%}: stop at {area:.0f} voxels, "
              f"coverage on a fresh corpus {held:.3f}")
    for name, s in strategies.items():
        print(f"  {name:16s} coverage {coverage(lesions, s):.3f}")

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        picks = np.argsort(areas)[np.linspace(0, len(areas) - 1, 4).astype(int)]
        fig, axes = plt.subplots(len(picks), len(strategies), figsize=(2 * len(strategies), 8))
        for r, i in enumerate(picks):
            for c, (name, s) in enumerate(strategies.items()):
                axes[r, c].imshow(lesions[i] * 1.0 + s[i] * 1.0, cmap="magma", vmin=0, vmax=2)
                axes[r, c].set_axis_off()
                if r == 0:
                    axes[r, c].set_title(name, fontsize=8)
        fig.savefig(args.plot, dpi=100, bbox_inches="tight")
        print("wrote", args.plot)


if __name__ == "__main__":
    main()
