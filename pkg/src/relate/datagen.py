"""Synthetic transformed image pairs and the standard preprocessing pipeline.

Generators produce pairs (x, y) where y is a known global transformation of
x: cyclic shifts of random dot images, split-screen shifts (independent
shifts in the top and bottom halves), small rotations of Gaussian noise, and
short movies of dots translating at a constant velocity.  Every generator is
deterministic given its seed.

Shift convention used throughout: a label (sx, sy) means the content moves
sx pixels to the right and sy pixels down, with wraparound:

    y[r, c] = x[(r - sy) % height, (c - sx) % width]

which is exactly ``np.roll(x, (sy, sx), axis=(0, 1))``.

Preprocessing follows the usual recipe for multiplicative feature learning:
per-patch DC centering and unit-norm scaling, then PCA whitening retaining a
fixed fraction of variance.  Whitening maps D-dimensional patches to a
K-dimensional whitened space; ``projection`` has shape (K, D) and
``inverse_projection`` (D, K), with projection @ inverse_projection ~ I_K.
"""

import json
import os
import struct
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateDataWarning

RELB_MAGIC = b"RELB"
RELB_VERSION = 1
_LABEL_KIND_BYTES = 12


@dataclass(frozen=True)
class Patch:
    """A single vectorized image patch with its geometry."""

    pixels: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64).ravel()
        object.__setattr__(self, "pixels", px)
        if self.height <= 0 or self.width <= 0:
            raise ValueError("patch geometry must be positive")
        if px.size % (self.height * self.width) != 0:
            raise ValueError(
                f"pixel count {px.size} incompatible with geometry "
                f"{self.height}x{self.width}"
            )
        if not np.all(np.isfinite(px)):
            raise ValueError("patch contains non-finite values")

    @property
    def num_frames(self):
        return self.pixels.size // (self.height * self.width)

    def as_image(self):
        """Reshape to (height, width), or (frames, height, width) for movies."""
        if self.num_frames == 1:
            return self.pixels.reshape(self.height, self.width)
        return self.pixels.reshape(self.num_frames, self.height, self.width)


@dataclass
class PairBatch:
    """A batch of input/output pairs with optional transformation labels.

    x has shape (num_pairs, input_dim) and y (num_pairs, output_dim).
    labels, when present, is a (num_pairs, label_dim) float array whose
    meaning is named by label_kind ("shift", "split_shift", "angle",
    "velocity").
    """

    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray = None
    label_kind: str = None
    height: int = 0
    width: int = 0
    num_frames: int = 1

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2:
            raise ValueError("x and y must be 2-d (num_pairs, dim)")
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"x has {self.x.shape[0]} pairs but y has {self.y.shape[0]}"
            )
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
            if self.labels.ndim == 1:
                self.labels = self.labels[:, None]
            if self.labels.shape[0] != self.x.shape[0]:
                raise ValueError("labels row count does not match pairs")

    @property
    def num_pairs(self):
        return self.x.shape[0]

    @property
    def input_dim(self):
        return self.x.shape[1]

    @property
    def output_dim(self):
        return self.y.shape[1]

    def pair(self, idx):
        """Return (x, y) at idx as Patch objects when geometry is known."""
        if self.height <= 0 or self.width <= 0:
            raise ValueError("batch has no geometry attached")
        return (
            Patch(self.x[idx], self.height, self.width),
            Patch(self.y[idx], self.height, self.width),
        )


def shift_image(img, sx, sy, wraparound=True):
    """Shift an image sx pixels right and sy pixels down.

    With wraparound the shift is cyclic (np.roll); otherwise content moving
    past the border is lost and vacated pixels are zero.
    """
    if wraparound:
        return np.roll(img, (sy, sx), axis=(0, 1))
    out = np.zeros_like(img)
    height, width = img.shape
    src_r = slice(max(0, -sy), min(height, height - sy))
    src_c = slice(max(0, -sx), min(width, width - sx))
    dst_r = slice(max(0, sy), min(height, height + sy))
    dst_c = slice(max(0, sx), min(width, width + sx))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def _check_dot_args(height, width, dot_density):
    if height <= 0 or width <= 0:
        raise ValueError("image dimensions must be positive")
    if not 0 < dot_density < 1:
        raise ValueError("dot_density must be in (0, 1)")


def _random_dots(rng, height, width, dot_density):
    n_px = height * width
    n_dots = max(1, int(round(dot_density * n_px)))
    img = np.zeros(n_px)
    idx = rng.choice(n_px, size=min(n_dots, n_px), replace=False)
    img[idx] = 1.0
    return img.reshape(height, width)


def gen_shifted_dots(num_pairs, height, width, dot_density, max_shift,
                     wraparound=True, seed=0):
    """Random dot images paired with shifted copies.

    Shifts are drawn uniformly from the integer square
    [-max_shift, max_shift]^2; labels are (sx, sy).  Cyclic shifts make the
    transformation an exact orthogonal permutation; wraparound=False gives
    the zero-padded variant instead.
    """
    _check_dot_args(height, width, dot_density)
    if max_shift >= min(height, width):
        raise ValueError("max_shift must be smaller than both image dimensions")
    rng = np.random.default_rng(seed)
    xs = np.empty((num_pairs, height * width))
    ys = np.empty_like(xs)
    labels = np.empty((num_pairs, 2))
    for n in range(num_pairs):
        img = _random_dots(rng, height, width, dot_density)
        sx, sy = rng.integers(-max_shift, max_shift + 1, size=2)
        xs[n] = img.ravel()
        ys[n] = shift_image(img, sx, sy, wraparound).ravel()
        labels[n] = (sx, sy)
    return PairBatch(xs, ys, labels, "shift", height, width)


def gen_splitscreen_dots(num_pairs, height, width, dot_density, max_shift,
                         seed=0):
    """Dot images whose top and bottom halves shift independently.

    Each half wraps around within itself, so the two motions never mix.
    Labels are (top_sx, top_sy, bottom_sx, bottom_sy).
    """
    _check_dot_args(height, width, dot_density)
    if height % 2 != 0:
        raise ValueError("height must be even for split-screen pairs")
    half = height // 2
    if max_shift >= min(half, width):
        raise ValueError("max_shift must be smaller than the half-height and width")
    rng = np.random.default_rng(seed)
    xs = np.empty((num_pairs, height * width))
    ys = np.empty_like(xs)
    labels = np.empty((num_pairs, 4))
    for n in range(num_pairs):
        img = _random_dots(rng, height, width, dot_density)
        s_top = rng.integers(-max_shift, max_shift + 1, size=2)
        s_bot = rng.integers(-max_shift, max_shift + 1, size=2)
        out = np.empty_like(img)
        out[:half] = shift_image(img[:half], s_top[0], s_top[1])
        out[half:] = shift_image(img[half:], s_bot[0], s_bot[1])
        xs[n] = img.ravel()
        ys[n] = out.ravel()
        labels[n] = (s_top[0], s_top[1], s_bot[0], s_bot[1])
    return PairBatch(xs, ys, labels, "split_shift", height, width)


def rotate_image(img, angle, interpolation="bilinear"):
    """Rotate an image about its center, counterclockwise on screen.

    Uses inverse mapping: each output pixel samples the source at the
    back-rotated location.  Out-of-bounds samples are zero.  With
    interpolation="nearest", quarter turns reproduce np.rot90 exactly.
    """
    height, width = img.shape
    cr = (height - 1) / 2.0
    cc = (width - 1) / 2.0
    rr, cc_grid = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    dr = rr - cr
    dc = cc_grid - cc
    cos_a = np.cos(angle)
    sin_a = np.sin(angle)
    src_r = cr + cos_a * dr + sin_a * dc
    src_c = cc - sin_a * dr + cos_a * dc
    out = np.zeros_like(img, dtype=np.float64)
    if interpolation == "nearest":
        ri = np.round(src_r).astype(int)
        ci = np.round(src_c).astype(int)
        ok = (ri >= 0) & (ri < height) & (ci >= 0) & (ci < width)
        out[ok] = img[ri[ok], ci[ok]]
    elif interpolation == "bilinear":
        r0 = np.floor(src_r).astype(int)
        c0 = np.floor(src_c).astype(int)
        fr = src_r - r0
        fc = src_c - c0
        for dr_i, dc_i, w in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            ri = r0 + dr_i
            ci = c0 + dc_i
            ok = (ri >= 0) & (ri < height) & (ci >= 0) & (ci < width)
            out[ok] += w[ok] * img[ri[ok], ci[ok]]
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return out


def gen_rotated_pairs(num_pairs, height, width, dot_density, max_angle,
                      seed=0, interpolation="bilinear"):
    """Random dot images paired with rotated copies.

    Angles are uniform in [-max_angle, max_angle] radians; the label is the
    angle.
    """
    _check_dot_args(height, width, dot_density)
    if not 0 < max_angle <= np.pi:
        raise ValueError("max_angle must be in (0, pi]")
    rng = np.random.default_rng(seed)
    xs = np.empty((num_pairs, height * width))
    ys = np.empty_like(xs)
    labels = np.empty((num_pairs, 1))
    for n in range(num_pairs):
        img = _random_dots(rng, height, width, dot_density)
        angle = rng.uniform(-max_angle, max_angle)
        xs[n] = img.ravel()
        ys[n] = rotate_image(img, angle, interpolation).ravel()
        labels[n] = angle
    return PairBatch(xs, ys, labels, "angle", height, width)


def gen_dot_movies(num_movies, height, width, num_frames=10, dot_density=0.1,
                   speed_range=(0, 2), seed=0):
    """Short movies of random dots translating at a constant velocity.

    Each movie is num_frames frames concatenated into one vector
    (frame-major), and x == y so a model with tied input/output weights can
    be trained on the movie against itself.  Velocities (vx, vy) are drawn
    uniformly from integer vectors with speed_range[0] <= max(|vx|, |vy|)
    <= speed_range[1].  Labels are (vx, vy).
    """
    _check_dot_args(height, width, dot_density)
    if num_frames < 2:
        raise ValueError("movies need at least 2 frames")
    lo, hi = speed_range
    if lo < 0 or hi < lo:
        raise ValueError("speed_range must satisfy 0 <= lo <= hi")
    if hi * (num_frames - 1) >= min(height, width) and hi > 0:
        warnings.warn(
            "dots wrap around more than once within a movie",
            DegenerateDataWarning,
            stacklevel=2,
        )
    candidates = [
        (vx, vy)
        for vx in range(-hi, hi + 1)
        for vy in range(-hi, hi + 1)
        if lo <= max(abs(vx), abs(vy)) <= hi
    ]
    if not candidates:
        raise ValueError("speed_range admits no integer velocities")
    rng = np.random.default_rng(seed)
    dim = height * width * num_frames
    xs = np.empty((num_movies, dim))
    labels = np.empty((num_movies, 2))
    for n in range(num_movies):
        first = _random_dots(rng, height, width, dot_density)
        vx, vy = candidates[rng.integers(len(candidates))]
        frames = [shift_image(first, t * vx, t * vy).ravel()
                  for t in range(num_frames)]
        xs[n] = np.concatenate(frames)
        labels[n] = (vx, vy)
    return PairBatch(xs, xs.copy(), labels, "velocity", height, width,
                     num_frames)


def normalize(batch):
    """Per-patch DC centering and unit-norm scaling, applied to x and y.

    Idempotent up to floating point.  Patches that are constant (zero after
    centering) stay zero; a DegenerateDataWarning reports how many.
    """
    def _norm_rows(a):
        a = a - a.mean(axis=1, keepdims=True)
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        dead = norms[:, 0] < 1e-12
        safe = np.where(dead[:, None], 1.0, norms)
        return a / safe, int(dead.sum())

    nx, dead_x = _norm_rows(batch.x)
    ny, dead_y = _norm_rows(batch.y)
    if dead_x or dead_y:
        warnings.warn(
            f"{dead_x + dead_y} constant patches normalized to zero",
            DegenerateDataWarning,
            stacklevel=2,
        )
    return PairBatch(nx, ny, batch.labels, batch.label_kind, batch.height,
                     batch.width, batch.num_frames)


@dataclass
class WhiteningTransform:
    """PCA whitening fitted to a data matrix.

    projection (K, D) maps centered data to whitened coordinates with unit
    variance per component; inverse_projection (D, K) maps back.
    retained_variance is the fraction of total variance actually kept.
    """

    mean: np.ndarray
    projection: np.ndarray
    inverse_projection: np.ndarray
    eigenvalues: np.ndarray
    retained_variance: float

    @property
    def input_dim(self):
        return self.projection.shape[1]

    @property
    def whitened_dim(self):
        return self.projection.shape[0]

    def apply(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.shape[-1] != self.input_dim:
            raise ValueError(
                f"data dim {data.shape[-1]} != whitening dim {self.input_dim}"
            )
        return (data - self.mean) @ self.projection.T

    def invert(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.shape[-1] != self.whitened_dim:
            raise ValueError(
                f"data dim {data.shape[-1]} != whitened dim {self.whitened_dim}"
            )
        return data @ self.inverse_projection.T + self.mean


def fit_whitening(data, retained_variance=0.95):
    """Fit PCA whitening keeping the smallest number of leading components
    whose variance fraction reaches retained_variance.

    data is an (N, D) array or a PairBatch (x and y rows pooled when their
    dimensions agree).
    """
    if isinstance(data, PairBatch):
        if data.input_dim == data.output_dim:
            data = np.vstack([data.x, data.y])
        else:
            data = data.x
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("data must be 2-d (samples, dim)")
    n, d = data.shape
    if n < 2:
        raise DataError("need at least 2 samples to fit whitening")
    if n < d:
        warnings.warn(
            f"fitting whitening with fewer samples ({n}) than dimensions ({d})",
            DegenerateDataWarning,
            stacklevel=2,
        )
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / n
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    total = vals.sum()
    if total <= 0:
        raise DataError("data has zero variance, cannot whiten")
    if not 0 < retained_variance <= 1:
        raise ValueError("retained_variance must be in (0, 1]")
    frac = np.cumsum(vals) / total
    k = int(np.searchsorted(frac, retained_variance - 1e-12) + 1)
    k = min(k, int((vals > 1e-12 * vals[0]).sum()))
    k = max(k, 1)
    keep_vals = vals[:k]
    keep_vecs = vecs[:, :k]
    scale = 1.0 / np.sqrt(keep_vals)
    projection = scale[:, None] * keep_vecs.T
    inverse_projection = keep_vecs * np.sqrt(keep_vals)[None, :]
    return WhiteningTransform(mean, projection, inverse_projection, vals,
                              float(keep_vals.sum() / total))


def apply_whitening(batch, transform):
    """Whiten both sides of a PairBatch (their dims must match the fit)."""
    wx = transform.apply(batch.x)
    wy = transform.apply(batch.y)
    out = PairBatch(wx, wy, batch.labels, batch.label_kind)
    out.num_frames = batch.num_frames
    return out


def save_batch(path, batch, extra_manifest=None):
    """Write a PairBatch in the binary pair-dataset format plus a JSON
    manifest sidecar at <path>.json.

    Layout (all little-endian): magic "RELB", version u32, then num_pairs,
    input_dim, output_dim as u64, then x and y as float64 row-major, then
    label_dim u32 (0 when absent), a 12-byte zero-padded label kind, and the
    labels as float64 row-major.  The binary file is bit-identical across
    runs; timestamps live only in the manifest.
    """
    path = os.fspath(path)
    with open(path, "wb") as f:
        f.write(RELB_MAGIC)
        f.write(struct.pack("<I", RELB_VERSION))
        f.write(struct.pack("<QQQ", batch.num_pairs, batch.input_dim,
                            batch.output_dim))
        f.write(np.ascontiguousarray(batch.x, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(batch.y, dtype="<f8").tobytes())
        if batch.labels is None:
            f.write(struct.pack("<I", 0))
            f.write(b"\x00" * _LABEL_KIND_BYTES)
        else:
            f.write(struct.pack("<I", batch.labels.shape[1]))
            kind = (batch.label_kind or "").encode("ascii")[:_LABEL_KIND_BYTES]
            f.write(kind.ljust(_LABEL_KIND_BYTES, b"\x00"))
            f.write(np.ascontiguousarray(batch.labels, dtype="<f8").tobytes())
    manifest = {
        "format": "RELB",
        "version": RELB_VERSION,
        "num_pairs": batch.num_pairs,
        "input_dim": batch.input_dim,
        "output_dim": batch.output_dim,
        "height": batch.height,
        "width": batch.width,
        "num_frames": batch.num_frames,
        "label_kind": batch.label_kind,
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_batch(path):
    """Read a pair dataset written by save_batch."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != RELB_MAGIC:
        raise DataError(f"{path}: not a pair-dataset file (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != RELB_VERSION:
        raise DataError(f"{path}: unsupported dataset version {version}")
    n, i, j = struct.unpack_from("<QQQ", raw, 8)
    off = 8 + 24
    need = off + 8 * n * (i + j) + 4 + _LABEL_KIND_BYTES
    if len(raw) < need:
        raise DataError(f"{path}: truncated dataset file")
    x = np.frombuffer(raw, dtype="<f8", count=n * i, offset=off).reshape(n, i)
    off += 8 * n * i
    y = np.frombuffer(raw, dtype="<f8", count=n * j, offset=off).reshape(n, j)
    off += 8 * n * j
    (label_dim,) = struct.unpack_from("<I", raw, off)
    off += 4
    kind = raw[off:off + _LABEL_KIND_BYTES].rstrip(b"\x00").decode("ascii")
    off += _LABEL_KIND_BYTES
    labels = None
    if label_dim:
        if len(raw) < off + 8 * n * label_dim:
            raise DataError(f"{path}: truncated label block")
        labels = np.frombuffer(raw, dtype="<f8", count=n * label_dim,
                               offset=off).reshape(n, label_dim)
    height = width = 0
    num_frames = 1
    manifest_path = path + ".json"
    if os.path.exists(manifest_path):
        with open(manifest_path) as f:
            manifest = json.load(f)
        height = int(manifest.get("height", 0) or 0)
        width = int(manifest.get("width", 0) or 0)
        num_frames = int(manifest.get("num_frames", 1) or 1)
    return PairBatch(x.copy(), y.copy(), labels.copy() if labels is not None
                     else None, kind or None, height, width, num_frames)
