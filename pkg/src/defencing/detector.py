"""Frame-level fence detection: sliding-window scan, joint clustering,
joint-to-mask connection, manual mask edits, and detection scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .cnn import CnnModel, forward_batch
from .image import FenceMask, Image

__all__ = [
    "JointDetections",
    "Edit",
    "scan",
    "cluster",
    "connect_joints",
    "eval_detection",
    "estimate_wire_thickness",
    "apply_manual_edits",
    "parse_edits",
]

log = logging.getLogger(__name__)

WINDOW = 32


@dataclass(frozen=True)
class JointDetections:
    """Clustered joint centroids plus the raw positive windows behind them."""

    joints: list[tuple[float, float]]
    raw_hits: list[tuple[tuple[float, float], float]]
    threshold: float
    windows_scanned: int


def scan(
    model: CnnModel,
    frame: Image,
    threshold: float = 0.5,
    stride: int = 4,
    cluster_radius: float = 8.0,
) -> JointDetections:
    """Classify every in-bounds 32x32 window of the luminance frame.

    A window is positive when score_joint exceeds both the threshold and
    score_nonjoint; positives are clustered into joint centroids.
    """
    if frame.width < WINDOW or frame.height < WINDOW:
        raise ValueError(f"frame {frame.width}x{frame.height} smaller than {WINDOW}x{WINDOW} window")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")

    lum = frame.luminance()
    windows = sliding_window_view(lum, (WINDOW, WINDOW))[::stride, ::stride]
    ny, nx = windows.shape[:2]
    flat = windows.reshape(-1, WINDOW, WINDOW)

    scores = np.zeros((flat.shape[0], 2))
    for lo in range(0, flat.shape[0], 512):
        scores[lo : lo + 512] = forward_batch(model, flat[lo : lo + 512])

    positive = (scores[:, 0] > threshold) & (scores[:, 0] > scores[:, 1])
    half = WINDOW // 2
    hits = []
    for idx in np.flatnonzero(positive):
        iy, ix = divmod(int(idx), nx)
        center = (float(ix * stride + half), float(iy * stride + half))
        hits.append((center, float(scores[idx, 0])))

    return JointDetections(
        joints=cluster(hits, cluster_radius),
        raw_hits=hits,
        threshold=threshold,
        windows_scanned=ny * nx,
    )


def cluster(
    hits: list[tuple[tuple[float, float], float]],
    cluster_radius: float = 8.0,
) -> list[tuple[float, float]]:
    """Single-link components over hit centers; score-weighted centroid each.

    Output is sorted by (y, x) and does not depend on the input ordering.
    """
    if cluster_radius <= 0:
        raise ValueError("cluster_radius must be positive")
    if not hits:
        return []
    pts = np.array([h[0] for h in hits])
    scores = np.array([h[1] for h in hits])

    parent = list(range(len(hits)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in cKDTree(pts).query_pairs(cluster_radius):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(len(hits)):
        groups.setdefault(find(i), []).append(i)

    centroids = []
    for members in groups.values():
        # Fixed accumulation order keeps the result bit-stable under input permutation.
        members = sorted(members, key=lambda i: (pts[i, 1], pts[i, 0], scores[i]))
        w = scores[members]
        p = pts[members]
        total = w.sum()
        if total <= 0:
            centroids.append((float(p[:, 0].mean()), float(p[:, 1].mean())))
        else:
            centroids.append((float((p[:, 0] * w).sum() / total), float((p[:, 1] * w).sum() / total)))
    centroids.sort(key=lambda c: (c[1], c[0]))
    return centroids


# --- rasterization ----------------------------------------------------------


def _paint_disc(bits: np.ndarray, center: tuple[float, float], radius: float, value: bool) -> None:
    h, w = bits.shape
    cx, cy = center
    x0 = max(0, int(np.floor(cx - radius)))
    x1 = min(w - 1, int(np.ceil(cx + radius)))
    y0 = max(0, int(np.floor(cy - radius)))
    y1 = min(h - 1, int(np.ceil(cy + radius)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
    inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    bits[y0 : y1 + 1, x0 : x1 + 1][inside] = value


def _paint_segment(
    bits: np.ndarray,
    p0: tuple[float, float],
    p1: tuple[float, float],
    thickness: float,
    value: bool,
) -> None:
    """Set pixels whose centers lie within thickness/2 of the segment."""
    h, w = bits.shape
    half = thickness / 2.0
    x0 = max(0, int(np.floor(min(p0[0], p1[0]) - half)))
    x1 = min(w - 1, int(np.ceil(max(p0[0], p1[0]) + half)))
    y0 = max(0, int(np.floor(min(p0[1], p1[1]) - half)))
    y1 = min(h - 1, int(np.ceil(max(p0[1], p1[1]) + half)))
    if x0 > x1 or y0 > y1:
        return
    ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    ax, ay = p0
    vx, vy = p1[0] - ax, p1[1] - ay
    vv = vx * vx + vy * vy
    if vv == 0.0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - ax) * vx + (ys - ay) * vy) / vv, 0.0, 1.0)
    d2 = (xs - ax - t * vx) ** 2 + (ys - ay - t * vy) ** 2
    bits[y0 : y1 + 1, x0 : x1 + 1][d2 <= half * half] = value


def _link_edges(
    joints: np.ndarray,
    link_radius: float | None,
    neighbors_max: int,
) -> tuple[set[tuple[int, int]], float]:
    """kNN-within-radius edge set (undirected, deduplicated)."""
    tree = cKDTree(joints)
    if link_radius is None:
        nn, _ = tree.query(joints, k=2)
        link_radius = 1.5 * float(np.median(nn[:, 1]))
    dists, idxs = tree.query(joints, k=min(neighbors_max + 1, len(joints)))
    edges: set[tuple[int, int]] = set()
    for i in range(len(joints)):
        for d, j in zip(dists[i], idxs[i]):
            if j == i or d > link_radius:
                continue
            edges.add((min(i, int(j)), max(i, int(j))))
    return edges, link_radius


def connect_joints(
    joints: list[tuple[float, float]],
    frame_dims: tuple[int, int],
    wire_thickness: float = 3.0,
    link_radius: float | None = None,
    neighbors_max: int = 4,
    extend_to_border: bool = False,
) -> FenceMask:
    """Rasterize the joint graph into a binary fence mask.

    Each joint is linked by straight wire segments to at most ``neighbors_max``
    nearest joints within ``link_radius`` (default: 1.5x the median
    nearest-joint distance); the mask is the union of those segments plus a
    disc of radius ``wire_thickness`` at every joint. ``extend_to_border``
    continues unpaired wire directions outward so the lattice spans the
    whole frame.
    """
    if wire_thickness < 1:
        raise ValueError("wire_thickness must be >= 1")
    if neighbors_max < 2:
        raise ValueError("neighbors_max must be >= 2")
    width, height = frame_dims
    bits = np.zeros((height, width), dtype=bool)

    for joint in joints:
        _paint_disc(bits, joint, wire_thickness, True)
    if len(joints) < 2:
        log.warning("connect_joints: %d joint(s); returning disc-only mask", len(joints))
        return FenceMask(bits)

    pts = np.asarray(joints, dtype=np.float64)
    edges, _ = _link_edges(pts, link_radius, neighbors_max)
    for i, j in sorted(edges):
        _paint_segment(bits, tuple(pts[i]), tuple(pts[j]), wire_thickness, True)

    if extend_to_border:
        diag = float(np.hypot(width, height))
        for i in range(len(pts)):
            dirs = []
            for a, b in edges:
                if i in (a, b):
                    other = pts[b if a == i else a]
                    v = other - pts[i]
                    n = np.linalg.norm(v)
                    if n > 0:
                        dirs.append(v / n)
            for u in dirs:
                # A wire passing through joint i should continue on the far
                # side; if no link points that way, extend a ray off-frame.
                if not any(np.dot(u, v) < -0.866 for v in dirs):
                    far = pts[i] - u * diag
                    _paint_segment(bits, tuple(pts[i]), (float(far[0]), float(far[1])), wire_thickness, True)

    return FenceMask(bits)


def eval_detection(
    predicted: list[tuple[float, float]],
    truth: list[tuple[float, float]],
    tolerance: float = 8.0,
) -> tuple[float, float, float]:
    """Greedy one-to-one matching within a pixel tolerance -> (precision, recall, F)."""
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    pairs = []
    for i, p in enumerate(predicted):
        for j, t in enumerate(truth):
            d = float(np.hypot(p[0] - t[0], p[1] - t[1]))
            if d <= tolerance:
                pairs.append((d, i, j))
    pairs.sort()
    used_p: set[int] = set()
    used_t: set[int] = set()
    matches = 0
    for _, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        matches += 1
    precision = matches / len(predicted) if predicted else 1.0
    recall = matches / len(truth) if truth else 1.0
    f = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return precision, recall, f


def estimate_wire_thickness(
    frame: Image,
    joints: list[tuple[float, float]],
    link_radius: float | None = None,
    neighbors_max: int = 4,
) -> float:
    """Median ridge width along the normals of the candidate wire segments.

    Samples the luminance profile perpendicular to each joint-to-joint link
    and measures the contiguous run that deviates from the local background
    like the segment midpoint does. Clamped to [2, 10] px; defaults to 3
    when no usable profile is found.
    """
    if len(joints) < 2:
        return 3.0
    lum = frame.luminance()
    h, w = lum.shape

    def sample(x: float, y: float) -> float:
        x = min(max(x, 0.0), w - 1.0)
        y = min(max(y, 0.0), h - 1.0)
        x0, y0 = int(x), int(y)
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0
        top = lum[y0, x0] * (1 - fx) + lum[y0, x1] * fx
        bot = lum[y1, x0] * (1 - fx) + lum[y1, x1] * fx
        return float(top * (1 - fy) + bot * fy)

    pts = np.asarray(joints, dtype=np.float64)
    edges, _ = _link_edges(pts, link_radius, neighbors_max)
    widths = []
    span = 10
    for i, j in sorted(edges):
        v = pts[j] - pts[i]
        n = np.linalg.norm(v)
        if n == 0:
            continue
        normal = np.array([-v[1], v[0]]) / n
        for t in (0.3, 0.5, 0.7):
            mid = pts[i] + t * v
            profile = np.array(
                [sample(*(mid + s * normal)) for s in range(-span, span + 1)]
            )
            background = np.concatenate([profile[: span - 6], profile[span + 7 :]]).mean()
            center = profile[span]
            contrast = center - background
            if abs(contrast) < 0.05:
                continue
            on_ridge = np.abs(profile - background) >= abs(contrast) / 2.0
            on_ridge &= np.sign(profile - background) == np.sign(contrast)
            width = 1
            for s in range(1, span + 1):
                if not on_ridge[span + s]:
                    break
                width += 1
            for s in range(1, span + 1):
                if not on_ridge[span - s]:
                    break
                width += 1
            widths.append(width)
    if not widths:
        return 3.0
    return float(np.clip(np.median(widths), 2.0, 10.0))


# --- manual edits -------------------------------------------------------------


@dataclass(frozen=True)
class Edit:
    """One mask edit: add/remove a rasterized segment or disc."""

    op: str  # "add" | "rm"
    kind: str  # "seg" | "disc"
    params: tuple[float, ...]  # seg: x1 y1 x2 y2 t; disc: x y r


def parse_edits(text: str) -> list[Edit]:
    """Parse an edits file: one `add|rm seg|disc <numbers>` primitive per line."""
    edits = []
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 3 or tokens[0] not in ("add", "rm") or tokens[1] not in ("seg", "disc"):
            raise ValueError(f"edits line {ln}: expected `add|rm seg|disc ...`, got {line!r}")
        try:
            params = tuple(float(t) for t in tokens[2:])
        except ValueError as exc:
            raise ValueError(f"edits line {ln}: non-numeric parameter ({exc})") from exc
        want = 5 if tokens[1] == "seg" else 3
        if len(params) != want:
            raise ValueError(f"edits line {ln}: {tokens[1]} takes {want} numbers, got {len(params)}")
        edits.append(Edit(tokens[0], tokens[1], params))
    return edits


def apply_manual_edits(mask: FenceMask, edits: list[Edit]) -> FenceMask:
    """Apply add/remove primitives in order; defining points must be in bounds."""
    bits = np.array(mask.bits)
    w, h = mask.width, mask.height

    def check(x: float, y: float) -> None:
        if not (0 <= x < w and 0 <= y < h):
            raise ValueError(f"edit point ({x}, {y}) outside {w}x{h} mask")

    for edit in edits:
        value = edit.op == "add"
        if edit.kind == "seg":
            x1, y1, x2, y2, t = edit.params
            check(x1, y1)
            check(x2, y2)
            _paint_segment(bits, (x1, y1), (x2, y2), t, value)
        else:
            x, y, r = edit.params
            check(x, y)
            _paint_disc(bits, (x, y), r, value)
    return FenceMask(bits)
