"""Render learned conv1 and depthwise 3x3x3 filters as binary PPM/PGM grids."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .zoo import STEM_NAME, Model

SCALE = 5
GAP = 1


def write_pnm(path, image: np.ndarray):
    """Write uint8 ``(H, W)`` as PGM (P5) or ``(H, W, 3)`` as PPM (P6)."""
    img = np.ascontiguousarray(image, dtype=np.uint8)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, maxval, pixels = parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM header")
    shape = (h, w) if magic == b"P5" else (h, w, 3)
    return np.frombuffer(pixels, dtype=np.uint8, count=int(np.prod(shape))).reshape(shape)


def normalize_filter(f: np.ndarray) -> np.ndarray:
    """Min-max scale one filter to 0..255; a constant filter becomes mid-gray."""
    lo, hi = float(f.min()), float(f.max())
    if hi - lo <= 0:
        return np.full(f.shape, 128, dtype=np.uint8)
    return np.rint((f - lo) / (hi - lo) * 255).astype(np.uint8)


def _tile(filt_u8: np.ndarray, color: bool) -> np.ndarray:
    """Lay out the temporal slices of one filter side by side, upscaled."""
    # color: (3, kt, kh, kw) -> kt slices of (kh, kw, 3); gray: (kt, kh, kw)
    slices = [filt_u8[:, t].transpose(1, 2, 0) for t in range(filt_u8.shape[1])] if color else list(filt_u8)
    h, w = slices[0].shape[:2]
    fill = 255
    shape = (h * SCALE, len(slices) * (w * SCALE + GAP) - GAP) + ((3,) if color else ())
    out = np.full(shape, fill, dtype=np.uint8)
    for i, s in enumerate(slices):
        big = np.repeat(np.repeat(s, SCALE, axis=0), SCALE, axis=1)
        x = i * (w * SCALE + GAP)
        out[:, x : x + w * SCALE] = big
    return out


def filter_grid(weight: np.ndarray, cols: int = 8) -> np.ndarray:
    """Tile every filter of a conv1 ``(C, 3, kt, kh, kw)`` or depthwise
    ``(C, 1, kt, kh, kw)`` weight into one image."""
    if weight.ndim != 5 or weight.shape[1] not in (1, 3):
        raise ValueError(f"expected (C, 1|3, kt, kh, kw) filters, got {weight.shape}")
    color = weight.shape[1] == 3
    tiles = []
    for f in weight:
        u8 = normalize_filter(f)
        tiles.append(_tile(u8 if color else u8[0], color))
    th, tw = tiles[0].shape[:2]
    n = len(tiles)
    cols = min(cols, n)
    rows = math.ceil(n / cols)
    pad = 2 * GAP
    shape = (rows * (th + pad) + pad, cols * (tw + pad) + pad) + ((3,) if color else ())
    grid = np.full(shape, 255, dtype=np.uint8)
    for i, t in enumerate(tiles):
        r, c = divmod(i, cols)
        y = pad + r * (th + pad)
        x = pad + c * (tw + pad)
        grid[y : y + th, x : x + tw] = t
    return grid


def eligible_layers(model: Model) -> list[str]:
    names = [STEM_NAME]
    for i, b in enumerate(model.blocks):
        for u in b.units:
            if u.plan.conv.depthwise and u.plan.conv.kernel != (1, 1, 1):
                names.append(u.name)
    return names


def viz_filters(model: Model, layer: str, out_dir, cols: int = 8) -> Path:
    """Write the filter grid of ``layer`` (``conv1``, a unit name or ``comp_k``)."""
    try:
        conv = model.conv_layer(layer)
    except KeyError:
        conv = None
    ok = conv is not None and (layer == STEM_NAME or (conv.spec.depthwise and conv.spec.kernel != (1, 1, 1)))
    if not ok:
        names = eligible_layers(model)
        shown = ", ".join(names[:6]) + (", ..." if len(names) > 6 else "")
        raise ValueError(f"layer {layer!r} is not conv1 or a depthwise 3x3x3 layer; eligible: {shown}")
    grid = filter_grid(conv.params["weight"], cols)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{layer}.{'ppm' if grid.ndim == 3 else 'pgm'}"
    write_pnm(path, grid)
    return path
