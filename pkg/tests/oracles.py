"""Independent reference implementations used as test oracles.

Nothing here imports the package's samplers or networks; these are written
from the mask and schedule definitions directly.
"""

import math

import numpy as np


def block_coverage_oracle(num_blocks, scale, gh, gw, draws, seed, aspect=(0.75, 1.5)):
    """Monte-Carlo mean spatial coverage of a union of independently placed rectangles.

    Each block has area round(scale * gh * gw) (halves rounded up), a uniform
    aspect ratio, side lengths clipped to the grid, and a top-left corner drawn
    uniformly among positions that keep it inside. Draws that cover the whole
    grid are rejected, mirroring the "context must be non-empty" rule.
    """
    rng = np.random.default_rng(seed)
    area = math.floor(scale * gh * gw + 0.5)
    total, kept = 0.0, 0
    while kept < draws:
        covered = np.zeros((gh, gw), dtype=bool)
        for _ in range(num_blocks):
            a = rng.uniform(*aspect)
            h = min(max(math.floor(math.sqrt(area / a) + 0.5), 1), gh)
            w = min(max(math.floor(math.sqrt(area * a) + 0.5), 1), gw)
            top = rng.integers(0, gh - h + 1)
            left = rng.integers(0, gw - w + 1)
            covered[top:top + h, left:left + w] = True
        if covered.all():
            continue
        total += covered.mean()
        kept += 1
    return total / draws


def adamw_reference(p, g, m, v, step, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam step written out in float64."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1**step)
    vhat = v / (1 - b2**step)
    p = p * (1 - lr * wd) - lr * mhat / (np.sqrt(vhat) + eps)
    return p, m, v
