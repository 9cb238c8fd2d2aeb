"""Inter-frame motion: global translation estimation, dense-flow import, and
the bilinear warp operator with an exact adjoint.

Sign conventions: a MotionField holds sampling displacements, i.e. frame
pixel p samples the reference at p + displacement(p). A *shift* d, as
returned by estimate_translation, means frame = shift_image(reference, d),
which corresponds to the sampling displacement -d (see warp_from_shift).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import FenceMask, Image

__all__ = [
    "MotionField",
    "WarpOperator",
    "estimate_translation",
    "build_warp",
    "warp_from_shift",
    "apply_warp",
    "apply_warp_adjoint",
    "load_flow",
    "write_flow",
]

FLOW_MAGIC = "DEFLOW v1"


@dataclass(frozen=True)
class MotionField:
    """Global translation or dense per-pixel displacement, in sampling convention."""

    kind: str  # "global-translation" | "dense"
    u: np.ndarray  # scalar () for global, (H, W) for dense
    v: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if self.kind == "global-translation":
            if u.shape != () or v.shape != ():
                raise ValueError("global translation takes scalar u, v")
        elif self.kind == "dense":
            if u.ndim != 2 or u.shape != v.shape:
                raise ValueError(f"dense field needs matching 2-D u, v, got {u.shape} / {v.shape}")
        else:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("motion field contains non-finite displacements")
        u.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def translation(cls, dx: float, dy: float) -> "MotionField":
        return cls("global-translation", np.float64(dx), np.float64(dy))

    @classmethod
    def dense(cls, u: np.ndarray, v: np.ndarray) -> "MotionField":
        return cls("dense", u, v)

    def displacements(self, dims: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) arrays of shape (height, width) for the given (width, height)."""
        width, height = dims
        if self.kind == "global-translation":
            return (np.full((height, width), float(self.u)), np.full((height, width), float(self.v)))
        if self.u.shape != (height, width):
            raise ValueError(f"dense field shape {self.u.shape} does not match {height}x{width}")
        return np.array(self.u), np.array(self.v)


@dataclass(frozen=True)
class WarpOperator:
    """Sparse linear resampler: each target pixel holds up to 4 weighted taps
    into the reference image. Out-of-bounds taps are dropped, so border rows
    may sum to less than one; the adjoint transposes the same taps exactly."""

    indices: np.ndarray  # (H*W, 4) flat source indices
    weights: np.ndarray  # (H*W, 4) nonnegative, zero for dropped taps
    dims: tuple[int, int]  # (width, height), shared by source and target

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        n = self.dims[0] * self.dims[1]
        if idx.shape != w.shape or idx.ndim != 2 or idx.shape[0] != n:
            raise ValueError("indices/weights must both be (width*height, taps)")
        idx.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "weights", w)

    @classmethod
    def identity(cls, dims: tuple[int, int]) -> "WarpOperator":
        n = dims[0] * dims[1]
        idx = np.zeros((n, 4), dtype=np.int64)
        idx[:, 0] = np.arange(n)
        w = np.zeros((n, 4))
        w[:, 0] = 1.0
        return cls(idx, w, dims)

    def apply(self, plane: np.ndarray) -> np.ndarray:
        """Forward warp of one (H, W) plane."""
        width, height = self.dims
        if plane.shape != (height, width):
            raise ValueError(f"plane shape {plane.shape} does not match {height}x{width}")
        out = (self.weights * plane.ravel()[self.indices]).sum(axis=1)
        return out.reshape(height, width)

    def apply_adjoint(self, plane: np.ndarray) -> np.ndarray:
        """Exact transpose: scatter-add the same taps back to source pixels."""
        width, height = self.dims
        if plane.shape != (height, width):
            raise ValueError(f"plane shape {plane.shape} does not match {height}x{width}")
        contrib = self.weights * plane.ravel()[:, None]
        out = np.bincount(self.indices.ravel(), weights=contrib.ravel(), minlength=width * height)
        return out.reshape(height, width)

    def apply_planes(self, planes: np.ndarray) -> np.ndarray:
        return np.stack([self.apply(p) for p in planes])

    def apply_adjoint_planes(self, planes: np.ndarray) -> np.ndarray:
        return np.stack([self.apply_adjoint(p) for p in planes])

    def row_weight_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1).reshape(self.dims[1], self.dims[0])


def build_warp(motion: MotionField, dims: tuple[int, int]) -> WarpOperator:
    """Bilinear warp for the given motion: target p samples reference p + displacement."""
    width, height = dims
    u, v = motion.displacements(dims)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    sx = (xs + u).ravel()
    sy = (ys + v).ravel()

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    n = width * height
    indices = np.zeros((n, 4), dtype=np.int64)
    weights = np.zeros((n, 4))
    corners = ((x0, y0, (1 - fx) * (1 - fy)), (x0 + 1, y0, fx * (1 - fy)),
               (x0, y0 + 1, (1 - fx) * fy), (x0 + 1, y0 + 1, fx * fy))
    for t, (cx, cy, w) in enumerate(corners):
        inside = (cx >= 0) & (cx < width) & (cy >= 0) & (cy < height)
        indices[:, t] = np.where(inside, cy * width + cx, 0)
        weights[:, t] = np.where(inside, w, 0.0)
    return WarpOperator(indices, weights, dims)


def warp_from_shift(shift: tuple[float, float], dims: tuple[int, int]) -> WarpOperator:
    """Operator aligning the reference with a frame equal to the reference shifted by ``shift``."""
    return build_warp(MotionField.translation(-shift[0], -shift[1]), dims)


def apply_warp(w: WarpOperator, x: Image) -> Image:
    return Image(w.apply_planes(x.planes))


def apply_warp_adjoint(w: WarpOperator, y: Image) -> np.ndarray:
    """Adjoint image as a raw (C, H, W) array.

    Scatter-added values can exceed the unit range, so wrapping the result in
    an Image (which clamps) would break the adjoint identity.
    """
    return w.apply_adjoint_planes(y.planes)


# --- translation estimation ---------------------------------------------------


def _downsample2(plane: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Masked 2x2 mean pooling; a coarse pixel is valid if any child is."""
    h2, w2 = plane.shape[0] // 2, plane.shape[1] // 2
    p = plane[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    m = valid[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2)
    cnt = m.sum(axis=(1, 3))
    s = (p * m).sum(axis=(1, 3))
    out = s / np.maximum(cnt, 1)
    return out, cnt > 0


def _ncc(frm, ref, vfrm, vref, dx: int, dy: int) -> tuple[float, int]:
    """Masked NCC between frame and reference shifted so frame(p) ~ ref(p - d)."""
    h, w = frm.shape
    y0, y1 = max(0, dy), h + min(0, dy)
    x0, x1 = max(0, dx), w + min(0, dx)
    if y0 >= y1 or x0 >= x1:
        return -np.inf, 0
    a = frm[y0:y1, x0:x1]
    b = ref[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
    valid = vfrm[y0:y1, x0:x1] & vref[y0 - dy : y1 - dy, x0 - dx : x1 - dx]
    n = int(valid.sum())
    if n < 16:
        return -np.inf, n
    av = a[valid]
    bv = b[valid]
    da = av - av.mean()
    db = bv - bv.mean()
    denom = math.sqrt(float((da * da).sum()) * float((db * db).sum()))
    if denom < 1e-12:
        return 0.0, n
    return float((da * db).sum()) / denom, n


def estimate_translation(
    reference: Image,
    frame: Image,
    exclude: tuple[FenceMask, FenceMask] | None = None,
    max_disp: int = 20,
) -> tuple[float, float]:
    """Sub-pixel global shift d such that frame ~ shift_image(reference, d).

    Coarse-to-fine search (3-level pyramid) maximizing masked normalized
    cross-correlation of luminance, then quadratic refinement of the integer
    peak. Ties break toward the smaller displacement.
    """
    if (reference.width, reference.height) != (frame.width, frame.height):
        raise ValueError("reference and frame dimensions differ")
    if max_disp < 1:
        raise ValueError("max_disp must be >= 1")

    ref = reference.luminance()
    frm = frame.luminance()
    if exclude is not None:
        vref = ~exclude[0].bits
        vfrm = ~exclude[1].bits
        if vref.shape != ref.shape or vfrm.shape != frm.shape:
            raise ValueError("exclude masks must match the frame dimensions")
    else:
        vref = np.ones_like(ref, dtype=bool)
        vfrm = np.ones_like(frm, dtype=bool)

    pyramid = [(frm, ref, vfrm, vref)]
    while len(pyramid) < 3 and min(pyramid[-1][0].shape) >= 32:
        f, r, vf, vr = pyramid[-1]
        f2, vf2 = _downsample2(f, vf)
        r2, vr2 = _downsample2(r, vr)
        pyramid.append((f2, r2, vf2, vr2))

    best = (0, 0)
    for level in range(len(pyramid) - 1, -1, -1):
        f, r, vf, vr = pyramid[level]
        scale = 2**level
        limit = int(math.ceil(max_disp / scale))
        if level == len(pyramid) - 1:
            cands = [(dx, dy) for dy in range(-limit, limit + 1) for dx in range(-limit, limit + 1)]
        else:
            cx, cy = best[0] * 2, best[1] * 2
            cands = [
                (cx + ex, cy + ey)
                for ey in range(-3, 4)
                for ex in range(-3, 4)
                if abs(cx + ex) <= limit and abs(cy + ey) <= limit
            ]
        cands.sort(key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))
        best_score = -np.inf
        for d in cands:
            score, _ = _ncc(f, r, vf, vr, d[0], d[1])
            if score > best_score:
                best_score = score
                best = d

    score0, overlap = _ncc(frm, ref, vfrm, vref, best[0], best[1])
    if overlap < 0.25 * ref.size:
        raise ValueError(
            f"insufficient unmasked overlap: {overlap} of {ref.size} pixels at shift {best}"
        )

    dx, dy = float(best[0]), float(best[1])
    if score0 < 1.0 - 1e-9:
        # 1-D quadratic refinement per axis through the integer peak.
        sxm, _ = _ncc(frm, ref, vfrm, vref, best[0] - 1, best[1])
        sxp, _ = _ncc(frm, ref, vfrm, vref, best[0] + 1, best[1])
        sym, _ = _ncc(frm, ref, vfrm, vref, best[0], best[1] - 1)
        syp, _ = _ncc(frm, ref, vfrm, vref, best[0], best[1] + 1)
        if np.isfinite(sxm) and np.isfinite(sxp):
            den = sxm - 2.0 * score0 + sxp
            if den < -1e-12:
                dx += float(np.clip(0.5 * (sxm - sxp) / den, -0.5, 0.5))
        if np.isfinite(sym) and np.isfinite(syp):
            den = sym - 2.0 * score0 + syp
            if den < -1e-12:
                dy += float(np.clip(0.5 * (sym - syp) / den, -0.5, 0.5))
    return dx, dy


# --- dense flow files -----------------------------------------------------------


def write_flow(field: MotionField, path: str | Path) -> None:
    """Write a dense field: ASCII `DEFLOW v1 <w> <h>` header then float32 (u, v) pairs."""
    if field.kind != "dense":
        raise ValueError("only dense motion fields are written to flow files")
    h, w = field.u.shape
    data = np.stack([field.u, field.v], axis=-1).astype("<f4").tobytes()
    Path(path).write_bytes(f"{FLOW_MAGIC} {w} {h}\n".encode("ascii") + data)


def load_flow(path: str | Path, dims: tuple[int, int] | None = None) -> MotionField:
    """Read a DEFLOW file, validating dimensions and finiteness."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: missing flow header")
    header = raw[:nl].decode("ascii", errors="replace").split()
    if len(header) != 4 or " ".join(header[:2]) != FLOW_MAGIC:
        raise ValueError(f"{path}: bad flow header {raw[:nl]!r}")
    try:
        w, h = int(header[2]), int(header[3])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed flow dimensions") from exc
    if w < 1 or h < 1:
        raise ValueError(f"{path}: bad flow dimensions {w}x{h}")
    if dims is not None and (w, h) != tuple(dims):
        raise ValueError(f"{path}: flow is {w}x{h}, expected {dims[0]}x{dims[1]}")
    body = raw[nl + 1 :]
    expected = w * h * 2 * 4
    if len(body) != expected:
        raise ValueError(f"{path}: expected {expected} bytes of flow data, found {len(body)}")
    uv = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w, 2)
    if not np.isfinite(uv).all():
        raise ValueError(f"{path}: flow contains non-finite values")
    return MotionField.dense(uv[:, :, 0], uv[:, :, 1])
