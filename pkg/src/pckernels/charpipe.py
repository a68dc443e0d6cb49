"""Raster characters to point-cloud graphs: IDX/PGM ingestion,
binarization, thinning, arc-length subsampling and graph extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .graphs import PointCloudGraph

__all__ = [
    "PipelineConfig",
    "IdxFormatError",
    "load_idx_images",
    "load_idx_labels",
    "load_pgm",
    "binarize",
    "thin",
    "extract_graph",
    "image_to_graph",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Raised for malformed IDX files."""


class EmptySkeletonError(ValueError):
    """The image contains no retained foreground after preprocessing."""


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the image-to-graph pipeline.

    threshold: binarization cut (pixel >= threshold is foreground).
    spacing: target arc distance in pixels between retained samples.
    min_component: skeleton components smaller than this are dropped.
    """

    threshold: int = 128
    spacing: float = 5.0
    min_component: int = 3

    def __post_init__(self):
        if not 1 <= self.threshold <= 255:
            raise ValueError("threshold must lie in [1, 255]")
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")
        if self.min_component < 1:
            raise ValueError("min_component must be >= 1")


def _read_idx_header(data, path, magic_expected, n_dims):
    if len(data) < 4 * (1 + n_dims):
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != magic_expected:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{magic_expected:08x}"
        )
    dims = struct.unpack(f">{n_dims}I", data[4 : 4 * (1 + n_dims)])
    return dims, 4 * (1 + n_dims)


def load_idx_images(path):
    """Images from an IDX3 file, returned as a (count, rows, cols) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    (count, rows, cols), offset = _read_idx_header(data, path, IDX_IMAGE_MAGIC, 3)
    expected = offset + count * rows * cols
    if len(data) != expected:
        raise IdxFormatError(
            f"{path}: expected {expected} bytes, found {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(
        count, rows, cols
    )


def load_idx_labels(path):
    """Labels from an IDX1 file, returned as a (count,) uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    (count,), offset = _read_idx_header(data, path, IDX_LABEL_MAGIC, 1)
    expected = offset + count
    if len(data) != expected:
        raise IdxFormatError(
            f"{path}: expected {expected} bytes, found {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=offset).copy()


def save_idx_images(images, path):
    """Inverse of load_idx_images, for producing test corpora."""
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        fh.write(images.tobytes())


def save_idx_labels(labels, path):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_pgm(path):
    """Binary (P5) PGM image as a 2-D uint8 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] not in b"\r\n":
                i += 1
        elif data[i : i + 1].isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    i += 1  # single whitespace after maxval
    pixels = data[i - 1 + 1 :][: width * height]
    if len(pixels) != width * height:
        raise ValueError(f"{path}: truncated pixel payload")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)


def binarize(image, threshold=128):
    """Foreground mask: pixel >= threshold."""
    return np.asarray(image) >= threshold


def _neighborhood_counts(grid):
    """Per pixel, number of 8-connected foreground neighbors."""
    g = grid.astype(np.int8)
    out = np.zeros_like(g, dtype=np.int8)
    out[1:, :] += g[:-1, :]
    out[:-1, :] += g[1:, :]
    out[:, 1:] += g[:, :-1]
    out[:, :-1] += g[:, 1:]
    out[1:, 1:] += g[:-1, :-1]
    out[1:, :-1] += g[:-1, 1:]
    out[:-1, 1:] += g[1:, :-1]
    out[:-1, :-1] += g[1:, 1:]
    return out


def thin(grid):
    """Two-subiteration morphological thinning to a one-pixel skeleton.

    Runs to a fixed point, so applying thin to its own output is a no-op.
    """
    img = np.pad(np.asarray(grid, dtype=bool), 1)

    def neighbors(a):
        # P2..P9 clockwise from north
        return [
            a[:-2, 1:-1], a[:-2, 2:], a[1:-1, 2:], a[2:, 2:],
            a[2:, 1:-1], a[2:, :-2], a[1:-1, :-2], a[:-2, :-2],
        ]

    while True:
        changed = False
        for phase in (0, 1):
            p = [x.astype(np.uint8) for x in neighbors(img)]
            b = sum(p)
            ring = p + [p[0]]
            a = sum(
                ((ring[k] == 0) & (ring[k + 1] == 1)).astype(np.uint8)
                for k in range(8)
            )
            if phase == 0:
                c1 = p[0] * p[2] * p[4] == 0
                c2 = p[2] * p[4] * p[6] == 0
            else:
                c1 = p[0] * p[2] * p[6] == 0
                c2 = p[0] * p[4] * p[6] == 0
            kill = (
                img[1:-1, 1:-1]
                & (b >= 2) & (b <= 6)
                & (a == 1)
                & c1 & c2
            )
            if kill.any():
                img[1:-1, 1:-1] &= ~kill
                changed = True
        if not changed:
            break
    return img[1:-1, 1:-1]


_OFFSETS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _components(pixels):
    """8-connected components of a set of (r, c) pixels, deterministic order."""
    todo = set(pixels)
    comps = []
    for p in sorted(pixels):
        if p not in todo:
            continue
        comp = []
        stack = [p]
        todo.discard(p)
        while stack:
            r, c = stack.pop()
            comp.append((r, c))
            for dr, dc in _OFFSETS:
                q = (r + dr, c + dc)
                if q in todo:
                    todo.discard(q)
                    stack.append(q)
        comps.append(sorted(comp))
    return comps


def extract_graph(skeleton, cfg):
    """Point-cloud graph from a thinned binary image.

    Skeleton junctions (3 or more neighbors) and endpoints always become
    vertices; along each arc between them, pixels are retained greedily
    every `spacing` pixels of arc length.  Edges join consecutive retained
    samples.  Vertex positions are (column, row) pixel coordinates and
    attributes are positions relative to the bounding-box center of the
    skeleton.  Components smaller than min_component pixels are dropped.
    """
    skeleton = np.asarray(skeleton, dtype=bool)
    pixels = [tuple(p) for p in np.argwhere(skeleton)]
    if not pixels:
        raise EmptySkeletonError("empty skeleton")
    pixel_set = set(pixels)
    nbrs = {
        p: [
            (p[0] + dr, p[1] + dc)
            for dr, dc in _OFFSETS
            if (p[0] + dr, p[1] + dc) in pixel_set
        ]
        for p in pixels
    }

    kept_pixels = []
    edges_px = set()
    for comp in _components(pixels):
        if len(comp) < cfg.min_component:
            continue
        comp_set = set(comp)
        nodes = [p for p in comp if len(nbrs[p]) != 2]
        if not nodes:
            nodes = [comp[0]]  # isolated loop: anchor at the smallest pixel
        node_set = set(nodes)
        kept = set(nodes)
        # trace arcs of degree-2 pixels between node pixels
        visited_steps = set()
        for start in nodes:
            for first in sorted(nbrs[start]):
                if (start, first) in visited_steps:
                    continue
                arc = [start, first]
                visited_steps.add((start, first))
                prev, cur = start, first
                while cur not in node_set:
                    nxt = [q for q in nbrs[cur] if q != prev]
                    if not nxt:
                        break  # stub end (degree-1 pixel is a node; safety)
                    prev, cur = cur, nxt[0]
                    arc.append(cur)
                visited_steps.add((arc[-1], arc[-2]) if len(arc) > 1 else (start, first))
                # greedy arc-length subsample, endpoints always retained
                samples = [arc[0]]
                acc = 0.0
                for a, b in zip(arc, arc[1:]):
                    step = 1.0 if (a[0] == b[0] or a[1] == b[1]) else np.sqrt(2.0)
                    acc += step
                    if acc >= cfg.spacing and b != arc[-1]:
                        samples.append(b)
                        acc = 0.0
                if arc[-1] != samples[-1]:
                    samples.append(arc[-1])
                kept.update(samples)
                for a, b in zip(samples, samples[1:]):
                    if a != b:
                        edges_px.add((a, b) if a < b else (b, a))
        kept_pixels.extend(sorted(kept))

    if not kept_pixels:
        raise EmptySkeletonError("all components below the minimum size")
    kept_pixels = sorted(set(kept_pixels))
    index = {p: i for i, p in enumerate(kept_pixels)}
    edges = {
        (index[a], index[b])
        for a, b in edges_px
        if a in index and b in index and index[a] != index[b]
    }
    rows = np.array([p[0] for p in kept_pixels], dtype=np.float64)
    cols = np.array([p[1] for p in kept_pixels], dtype=np.float64)
    positions = np.stack([cols, rows], axis=1)  # (x, y) with y downward
    fg = np.argwhere(skeleton)
    center_rc = 0.5 * (fg.min(axis=0) + fg.max(axis=0))
    center = np.array([center_rc[1], center_rc[0]])
    attributes = positions - center
    return PointCloudGraph(positions, attributes, edges)


def image_to_graph(image, cfg):
    """Full pipeline: binarize, thin, extract the graph."""
    return extract_graph(thin(binarize(image, cfg.threshold)), cfg)


def pool_image(image, threshold, size):
    """Binarized image block-averaged onto a fixed size x size grid.

    The fixed-length vector input of the structure-blind baseline kernel.
    """
    mask = binarize(image, threshold).astype(np.float64)
    h, wid = mask.shape
    side = max(h, wid)
    sq = np.zeros((side, side))
    r0 = (side - h) // 2
    c0 = (side - wid) // 2
    sq[r0 : r0 + h, c0 : c0 + wid] = mask
    # block-average via bincount on target cells
    ridx = (np.arange(side) * size) // side
    cidx = (np.arange(side) * size) // side
    out = np.zeros((size, size))
    cnt = np.zeros((size, size))
    np.add.at(out, (ridx[:, None].repeat(side, 1), cidx[None, :].repeat(side, 0)), sq)
    np.add.at(cnt, (ridx[:, None].repeat(side, 1), cidx[None, :].repeat(side, 0)), 1.0)
    return (out / cnt).ravel()
