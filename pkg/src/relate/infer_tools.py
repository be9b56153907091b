"""Inference utilities on trained gated models: flow fields and analogies.

A code z inferred from a pair (x, y) defines the linear warp the model
believes turned x into y:

    L = wy diag(wz^T z) wx^T        (so decode(x, z) = L x + bias_y)

infer_flow reads a toy optical flow off L: each input pixel's displacement
points at the output pixel it is most strongly connected to.  Since the
training transformations wrap around, raw displacements are reduced to
their minimal cyclic representative (a 12-pixel rightward step on a
13-wide patch is reported as 1 left).  Confidence is the winning warp
weight; pixels below a fraction of the strongest weight are treated as
unreliable (dark regions say little about motion).

analogy re-applies a pair's inferred code to a new image: z from
(x_src, y_src), prediction decode(x_new, z).  The code depends on the
transformation, not the content, so the prediction shows x_new undergoing
the source pair's motion.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import gae as _gae


@dataclass
class FlowField:
    """Per-pixel displacements (dr, dc) and confidences on an H x W grid."""

    dr: np.ndarray
    dc: np.ndarray
    confidence: np.ndarray
    height: int
    width: int

    def confident_mask(self, fraction=0.1):
        """Pixels whose confidence reaches fraction * max confidence."""
        top = self.confidence.max()
        if top <= 0:
            return np.zeros_like(self.confidence, dtype=bool)
        return self.confidence >= fraction * top

    def median_displacement(self, fraction=0.1):
        """(dr, dc) medians over confident pixels."""
        mask = self.confident_mask(fraction)
        if not mask.any():
            return 0.0, 0.0
        return (float(np.median(self.dr[mask])),
                float(np.median(self.dc[mask])))

    def to_json(self):
        return json.dumps({
            "height": self.height,
            "width": self.width,
            "dr": self.dr.astype(int).tolist(),
            "dc": self.dc.astype(int).tolist(),
            "confidence": self.confidence.tolist(),
        }, sort_keys=True)


def _wrap_min(delta, n):
    return (delta + n // 2) % n - n // 2


def code_warp(model, z):
    """The warp matrix L = wy diag(wz^T z) wx^T for a code z."""
    p = model.params
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape[0] != p.num_maps:
        raise ValueError("code length does not match the model")
    return (p.wy * (p.wz.T @ z)) @ p.wx.T


MAX_FLOW_PIXELS = 1024


def infer_flow(model, x, y, height=None, width=None, binarize_code=False):
    """Flow field explaining y as a pixel rearrangement of x.

    Steps: encode the pair, expand the code's warp, then pick for every
    input pixel the output position with the largest warp weight.  Ties go
    to the smallest displacement magnitude, then row-major order.
    Wraparound displacements are reduced to the minimal representative.
    binarize_code thresholds z at 0.5 before expanding the warp.
    """
    p = model.params
    if not p.is_finite():
        raise ValueError("model has non-finite parameters")
    if p.num_x != p.num_y:
        raise ValueError("flow needs matching input/output dims")
    if p.num_x > MAX_FLOW_PIXELS:
        raise ValueError(
            f"flow supports up to {MAX_FLOW_PIXELS} pixels; got {p.num_x}"
        )
    if height is None or width is None:
        side = math.isqrt(p.num_x)
        if side * side != p.num_x:
            raise ValueError("patch is not square; pass height and width")
        height = width = side
    if height * width != p.num_x:
        raise ValueError("height * width must match the model dims")
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    code = _gae.encode(model, x, y).z
    if binarize_code:
        code = (code >= 0.5).astype(np.float64)
    warp = code_warp(model, code)
    dr = np.zeros((height, width), dtype=int)
    dc = np.zeros((height, width), dtype=int)
    conf = np.zeros((height, width))
    for i in range(height * width):
        col = warp[:, i]
        top = col.max()
        candidates = np.flatnonzero(col >= top - 1e-12 * max(1.0, abs(top)))
        ri, ci = divmod(i, width)
        best = None
        for j in candidates:
            rj, cj = divmod(int(j), width)
            d = (_wrap_min(rj - ri, height), _wrap_min(cj - ci, width))
            key = (d[0] * d[0] + d[1] * d[1], int(j))
            if best is None or key < best[0]:
                best = (key, d)
        dr[ri, ci], dc[ri, ci] = best[1]
        conf[ri, ci] = top
    return FlowField(dr, dc, conf, height, width)


def analogy(model, x_src, y_src, x_new):
    """Apply the transformation inferred from (x_src, y_src) to x_new."""
    code = _gae.encode(model, x_src, y_src)
    return _gae.decode(model, x_new, code.z)
