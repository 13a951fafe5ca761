"""Floyd-Steinberg error diffusion for turning gray patterns into DMD masks.

Row-major left-to-right scan, a pixel becomes 1 when its accumulated value is
>= 0.5, and the quantization error spreads 7/16 right, 3/16 down-left,
5/16 down, 1/16 down-right. At the borders the taps that fall outside the
grid are dropped and the remaining ones rescaled to sum to one, so only the
last pixel's error leaves the pattern and the mean is kept to within 1/N.
"""

from __future__ import annotations

import numpy as np

from .data import SIDE
from .encoder import BINARY, GRAY, PatternBank

THRESHOLD = 0.5
_KERNEL = ((0, 1, 7 / 16), (1, -1, 3 / 16), (1, 0, 5 / 16), (1, 1, 1 / 16))


def floyd_steinberg(images: np.ndarray) -> np.ndarray:
    """Dither a stack of ``(n, h, w)`` (or one ``(h, w)``) gray images to {0, 1}.

    All images are processed in lockstep, pixel by pixel; each one sees exactly
    the scalar recurrence.
    """
    src = np.array(images, dtype=np.float64)
    single = src.ndim == 2
    if single:
        src = src[None]
    if src.size and (src.min() < 0.0 or src.max() > 1.0):
        raise ValueError("dithering expects values in [0, 1]")
    _, h, w = src.shape
    out = np.zeros_like(src)
    for r in range(h):
        for c in range(w):
            v = src[:, r, c]
            q = (v >= THRESHOLD).astype(np.float64)
            out[:, r, c] = q
            err = v - q
            for rr, cc, wt in _taps(r, c, h, w):
                src[:, rr, cc] += err * wt
    return out[0] if single else out


def _taps(r: int, c: int, h: int, w: int) -> list[tuple[int, int, float]]:
    inside = [(r + dr, c + dc, wt) for dr, dc, wt in _KERNEL if r + dr < h and 0 <= c + dc < w]
    total = sum(wt for _, _, wt in inside)
    if total == 1.0:
        return inside
    return [(rr, cc, wt / total) for rr, cc, wt in inside]


def binarize_bank(gray: PatternBank, side: int = SIDE) -> PatternBank:
    if gray.domain != GRAY:
        raise ValueError("binarize_bank expects a gray bank")
    bits = floyd_steinberg(gray.patterns.reshape(gray.count, side, side))
    prov = "learned-binarized" if gray.provenance == "learned" else gray.provenance
    return PatternBank(bits.reshape(gray.count, -1), BINARY, prov, dict(gray.meta))
