"""How the size penalty steers a segmentation that scribbles alone cannot.

A single image is scored with partial cross-entropy on a handful of scribbled
voxels, then with the size penalty added. Gradient descent directly on the
class scores (no network) shows what each objective asks for: the scribbles
only pin the voxels they touch, while the penalty pushes the soft class
volume into its bounds. Without a network there is no spatial prior, so the
constrained gland mass spreads thinly over the image; in training the
convolutional features decide where the volume goes.

    python demos/01_size_constraint.py
"""

import numpy as np

from weakseg.losses import (UNLABELED, ConstraintConfig, SizeBounds, combined_loss,
                            constraint_penalty, image_tag_bounds, partial_cross_entropy,
                            predicted_volume, softmax)


def descend(loss_fn, scores, steps=400, lr=20.0):
    scores = scores.copy()
    for _ in range(steps):
        _, g = loss_fn(softmax(scores))
        scores -= lr * g
    return softmax(scores)


def main():
    print("penalty C(v) for bounds (10, 40):")
    for v in (0, 5, 10, 25, 40, 55):
        value, slope = constraint_penalty(v, SizeBounds(10, 40))
        print(f"  v={v:3d}  C={value:6.1f}  dC/dv={slope:+6.1f}")
    print("image-tag bounds on a 1024-voxel image:",
          image_tag_bounds(True, 1024), image_tag_bounds(False, 1024))

    # 32 x 32 image, a 10 x 10 "gland" scribbled with one 3 x 3 patch, background with another
    ann = np.full((32, 32), UNLABELED)
    ann[14:17, 14:17] = 1
    ann[2:5, 2:5] = 0
    start = np.random.default_rng(0).normal(0, 0.1, (3, 32, 32))
    presence = [True, True, False]

    ce_only = descend(lambda p: partial_cross_entropy(p, ann), start)
    cfg = ConstraintConfig(lam=1e-3, modes={1: "common_bounds", 2: "image_tag"},
                           bounds={1: SizeBounds(90, 110)})
    constrained = descend(lambda p: combined_loss(p, ann, cfg, presence), start)

    for name, p in (("partial CE", ce_only), ("partial CE + size penalty", constrained)):
        print(f"{name:28s} V_gland={predicted_volume(p, 1):7.1f}  "
              f"V_lesion={predicted_volume(p, 2):7.1f}  "
              f"argmax gland voxels={(p.argmax(0) == 1).sum()}")


if __name__ == "__main__":
    main()
