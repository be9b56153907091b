"""Raster exports: filter grids, flow arrow plots, analogy strips.

Everything renders to plain uint8 arrays first and is written with PIL,
so outputs are byte-identical across runs (no embedded timestamps).
Multi-frame filters are laid out with their frames side by side.
"""

import math

import numpy as np
from PIL import Image

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def _scale_to_u8(img):
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    if hi - lo < 1e-12:
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.round(255 * (img - lo) / (hi - lo)).astype(np.uint8)


def filter_grid(filters, height, width, num_frames=1, pad=1):
    """Tile filter columns into one grayscale image.

    Each column is reshaped to (num_frames, height, width), min-max scaled
    per filter, frames concatenated horizontally, and the tiles arranged
    in a near-square grid with a gray border.
    """
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 2:
        raise ValueError("filters must be (dim, num_filters)")
    if filters.shape[0] != height * width * num_frames:
        raise ValueError("filter length does not match the geometry")
    count = filters.shape[1]
    cols = math.ceil(math.sqrt(count))
    rows = math.ceil(count / cols)
    tile_h = height
    tile_w = width * num_frames
    out = np.full((rows * (tile_h + pad) + pad,
                   cols * (tile_w + pad) + pad), 96, dtype=np.uint8)
    for idx in range(count):
        tile = filters[:, idx].reshape(num_frames, height, width)
        tile = _scale_to_u8(np.hstack(list(tile)))
        r, c = divmod(idx, cols)
        top = r * (tile_h + pad) + pad
        left = c * (tile_w + pad) + pad
        out[top:top + tile_h, left:left + tile_w] = tile
    return out


def save_image(path, array):
    """Write a uint8 grayscale or RGB(A) array as PNG/PGM by suffix."""
    Image.fromarray(np.asarray(array)).save(path)
    return path


def flow_image(flow, background=None):
    """Arrow plot of a FlowField, rasterized to an RGB uint8 array.

    Confident pixels get arrows; the optional background image is drawn
    underneath in grayscale.
    """
    fig = plt.figure(figsize=(4, 4), dpi=64)
    ax = fig.add_axes([0, 0, 1, 1])
    ax.set_axis_off()
    if background is not None:
        ax.imshow(np.asarray(background).reshape(flow.height, flow.width),
                  cmap="gray", interpolation="nearest")
    mask = flow.confident_mask()
    rr, cc = np.nonzero(mask)
    # imshow puts row 0 at the top, so arrows pointing "down" need +dr.
    ax.quiver(cc, rr, flow.dc[mask], flow.dr[mask], angles="xy",
              scale_units="xy", scale=1.0, color="red", width=0.01)
    ax.set_xlim(-0.5, flow.width - 0.5)
    ax.set_ylim(flow.height - 0.5, -0.5)
    fig.canvas.draw()
    buf = np.asarray(fig.canvas.buffer_rgba())[:, :, :3].copy()
    plt.close(fig)
    return buf


def analogy_strip(images, height, width, pad=2):
    """Lay out images (e.g. x_src | y_src | flow | x_new | y_pred) in a row.

    Grayscale vectors are reshaped to (height, width) and min-max scaled;
    RGB arrays (like flow_image output) are resized to the tile height.
    """
    tiles = []
    for img in images:
        img = np.asarray(img)
        if img.ndim == 3:
            pil = Image.fromarray(img.astype(np.uint8))
            scale = height / img.shape[0]
            pil = pil.resize((max(1, round(img.shape[1] * scale)), height),
                             Image.NEAREST)
            tiles.append(np.asarray(pil))
        else:
            gray = _scale_to_u8(img.reshape(height, width))
            tiles.append(np.stack([gray] * 3, axis=-1))
    total_w = sum(t.shape[1] for t in tiles) + pad * (len(tiles) + 1)
    out = np.full((height + 2 * pad, total_w, 3), 96, dtype=np.uint8)
    left = pad
    for t in tiles:
        out[pad:pad + t.shape[0], left:left + t.shape[1]] = t
        left += t.shape[1] + pad
    return out
