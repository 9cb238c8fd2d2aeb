"""Synthetic fence lattices with ground truth, texel datasets, and scene fabrication.

A fence layer is two families of parallel wires rasterized over the frame;
wire intersections are the ground-truth joints. Multi-frame occluded
sequences are fabricated by translating a textured background under a
static fence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import FenceMask, Image, Patch, extract_patch, load_image, resize_bilinear, save_image

__all__ = [
    "FenceLayer",
    "TexelDataset",
    "generate_fence",
    "composite",
    "shift_mask",
    "shift_image",
    "textured_background",
    "random_scene",
    "build_texel_dataset",
    "augment",
    "save_joints",
    "load_joints",
    "save_texel_dataset",
    "load_texel_dataset",
]

LABEL_JOINT = 1
LABEL_NONJOINT = 0


@dataclass(frozen=True)
class FenceLayer:
    """Rasterized wire lattice plus its ground-truth joint locations."""

    mask: FenceMask
    joints: list[tuple[float, float]]
    wire_thickness: float
    spacing: float
    angle: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class TexelDataset:
    """Labeled 32x32 patches: joint-centered positives, joint-free negatives."""

    samples: list[tuple[Patch, int]]

    @property
    def n_positive(self) -> int:
        return sum(1 for _, label in self.samples if label == LABEL_JOINT)

    @property
    def n_negative(self) -> int:
        return sum(1 for _, label in self.samples if label == LABEL_NONJOINT)

    def __len__(self) -> int:
        return len(self.samples)


def _family_normals(angle_deg: float, lattice_kind: str) -> list[float]:
    """Normal angles (radians) of the two wire families."""
    a = math.radians(angle_deg)
    if lattice_kind == "rectangular":
        directions = [a, a + math.pi / 2.0]
    elif lattice_kind == "diamond":
        if abs(math.sin(2.0 * a)) < 1e-9:
            raise ValueError("diamond lattice degenerates to parallel wires at this angle")
        directions = [a, -a]
    else:
        raise ValueError(f"unknown lattice kind {lattice_kind!r}")
    return [d + math.pi / 2.0 for d in directions]


def generate_fence(
    width: int,
    height: int,
    spacing: float,
    angle: float,
    wire_thickness: float,
    lattice_kind: str = "rectangular",
    seed: int = 0,
    phases: tuple[float, float] | None = None,
    color: tuple[float, float, float] | None = None,
) -> FenceLayer:
    """Rasterize a two-family wire lattice and enumerate its joints.

    Wires of each family are parallel lines ``spacing`` apart, drawn with the
    given thickness; families run at ``angle`` and ``angle + 90`` degrees
    (rectangular) or at ``+/- angle`` (diamond). Phase offsets and wire color
    are drawn from the seed unless given explicitly.
    """
    if width < 64 or height < 64:
        raise ValueError(f"fence frame must be at least 64x64, got {width}x{height}")
    if wire_thickness < 1:
        raise ValueError(f"wire thickness must be >= 1 px, got {wire_thickness}")
    if spacing <= 2.0 * wire_thickness:
        raise ValueError(f"spacing {spacing} too small for thickness {wire_thickness}")

    rng = np.random.default_rng(seed)
    normals = _family_normals(angle, lattice_kind)
    if phases is None:
        phases = (rng.uniform(0.0, spacing), rng.uniform(0.0, spacing))
    if color is None:
        base = rng.uniform(0.03, 0.30)
        color = tuple(float(np.clip(base + rng.uniform(-0.02, 0.02), 0.0, 1.0)) for _ in range(3))

    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    on = np.zeros((height, width), dtype=bool)
    half = wire_thickness / 2.0
    for phi, phase in zip(normals, phases):
        t = xs * math.cos(phi) + ys * math.sin(phi) - phase
        d = np.abs(t - np.round(t / spacing) * spacing)
        on |= d <= half

    joints = _wire_intersections(width, height, normals, phases, spacing)
    # Rasterization by pixel-center test can skip a thin angled wire at the
    # exact crossing; joints are on both centerlines by construction.
    bits = on.copy()
    for jx, jy in joints:
        bits[int(round(jy)), int(round(jx))] = True

    return FenceLayer(
        mask=FenceMask(bits),
        joints=joints,
        wire_thickness=float(wire_thickness),
        spacing=float(spacing),
        angle=float(angle),
        color=color,
    )


def _wire_intersections(
    width: int,
    height: int,
    normals: list[float],
    phases: tuple[float, float],
    spacing: float,
) -> list[tuple[float, float]]:
    """All pairwise intersections of the two line families inside the frame."""
    n_a = np.array([math.cos(normals[0]), math.sin(normals[0])])
    n_b = np.array([math.cos(normals[1]), math.sin(normals[1])])
    det = n_a[0] * n_b[1] - n_a[1] * n_b[0]
    if abs(det) < 1e-9:
        raise ValueError("wire families are parallel; no joints exist")

    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0], [0.0, height - 1.0], [width - 1.0, height - 1.0]])

    def k_range(n: np.ndarray, phase: float) -> range:
        t = corners @ n
        lo = int(math.floor((t.min() - phase) / spacing))
        hi = int(math.ceil((t.max() - phase) / spacing))
        return range(lo, hi + 1)

    inv = np.linalg.inv(np.array([n_a, n_b]))
    joints = []
    for ka in k_range(n_a, phases[0]):
        for kb in k_range(n_b, phases[1]):
            p = inv @ np.array([phases[0] + ka * spacing, phases[1] + kb * spacing])
            x, y = float(p[0]), float(p[1])
            if 0.0 <= x <= width - 1.0 and 0.0 <= y <= height - 1.0:
                joints.append((x, y))
    joints.sort(key=lambda j: (j[1], j[0]))
    return joints


def shift_mask(mask: FenceMask, offset: tuple[int, int]) -> FenceMask:
    """Translate a mask by integer (dx, dy); uncovered area becomes background."""
    dx, dy = int(offset[0]), int(offset[1])
    out = np.zeros_like(mask.bits)
    h, w = mask.bits.shape
    ys0, ys1 = max(0, dy), min(h, h + dy)
    xs0, xs1 = max(0, dx), min(w, w + dx)
    out[ys0:ys1, xs0:xs1] = mask.bits[ys0 - dy : ys1 - dy, xs0 - dx : xs1 - dx]
    return FenceMask(out)


def composite(
    background: Image,
    fence: FenceLayer,
    offset: tuple[int, int] = (0, 0),
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> Image:
    """Superimpose the fence on a background: wire color on the shifted mask support.

    ``noise_sigma`` > 0 perturbs the rendered wire pixels with seeded Gaussian
    noise so synthetic wires are not trivially constant-colored.
    """
    mask = shift_mask(fence.mask, offset) if offset != (0, 0) else fence.mask
    if mask.bits.shape != (background.height, background.width):
        raise ValueError("fence mask and background dimensions differ")
    out = np.array(background.planes)
    for c in range(background.channels):
        col = fence.color[c] if background.channels == 3 else float(np.mean(fence.color))
        out[c][mask.bits] = col
    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        n = int(mask.bits.sum())
        for c in range(background.channels):
            out[c][mask.bits] += rng.normal(0.0, noise_sigma, size=n)
    return Image(out)


def shift_image(image: Image, displacement: tuple[int, int]) -> Image:
    """Integer translation with replicate-border fill."""
    dx, dy = int(displacement[0]), int(displacement[1])
    if abs(dx) >= image.width / 4 or abs(dy) >= image.height / 4:
        raise ValueError(f"displacement {displacement} too large for {image.width}x{image.height}")
    xs = np.clip(np.arange(image.width) - dx, 0, image.width - 1)
    ys = np.clip(np.arange(image.height) - dy, 0, image.height - 1)
    return Image(image.planes[:, ys[:, None], xs[None, :]])


def _upsample_grid(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear upsampling of a coarse 2-D grid."""
    gh, gw = grid.shape
    ry = np.linspace(0.0, gh - 1.0, height)
    rx = np.linspace(0.0, gw - 1.0, width)
    iy = np.minimum(ry.astype(np.int64), gh - 2)
    ix = np.minimum(rx.astype(np.int64), gw - 2)
    fy = (ry - iy)[:, None]
    fx = (rx - ix)[None, :]
    top = grid[iy[:, None], ix[None, :]] * (1 - fx) + grid[iy[:, None], ix[None, :] + 1] * fx
    bot = grid[iy[:, None] + 1, ix[None, :]] * (1 - fx) + grid[iy[:, None] + 1, ix[None, :] + 1] * fx
    return top * (1 - fy) + bot * fy


def textured_background(width: int, height: int, channels: int = 1, seed: int = 0) -> Image:
    """Multi-octave value-noise texture: smooth enough to inpaint, rich enough to register."""
    rng = np.random.default_rng(seed)
    planes = np.zeros((channels, height, width))
    base = None
    for c in range(channels):
        acc = np.zeros((height, width))
        total = 0.0
        for cell in (64, 32, 16, 8):
            gh = max(2, height // cell + 2)
            gw = max(2, width // cell + 2)
            w = cell**0.85
            acc += w * _upsample_grid(rng.random((gh, gw)), height, width)
            total += w
        acc /= total
        if channels == 3:
            # Correlated channels: shared structure with a mild per-channel cast.
            if base is None:
                base = acc
            acc = 0.75 * base + 0.25 * acc
        planes[c] = acc
    lo, hi = planes.min(), planes.max()
    planes = 0.05 + 0.9 * (planes - lo) / max(hi - lo, 1e-12)
    return Image(planes)


def random_scene(
    width: int,
    height: int,
    seed: int,
    channels: int = 1,
    noise_sigma: float = 0.02,
    spacing: float | None = None,
    angle: float | None = None,
    wire_thickness: float | None = None,
    wire_color: float | None = None,
) -> tuple[Image, Image, FenceLayer]:
    """Fabricate one (clean background, fenced frame, fence layer) triple.

    Fence geometry defaults to seeded draws from ranges that keep joints
    learnable at the 32x32 texel scale (spacing 24-40 px, shallow lattice
    angles, dark wires); pass explicit values to pin any of them.
    """
    rng = np.random.default_rng(seed)
    base = textured_background(width, height, channels, seed=int(rng.integers(2**31)))
    # Keep the background mid-to-bright so dark wires stay visible everywhere,
    # as they must be for detection to be a sensible task.
    clean = Image(0.40 + (base.planes - 0.05) * (0.55 / 0.90))
    draws = (rng.uniform(24.0, 40.0), rng.uniform(-18.0, 18.0), rng.integers(3, 5), rng.uniform(0.02, 0.25))
    wire = float(draws[3] if wire_color is None else wire_color)
    fence = generate_fence(
        width,
        height,
        spacing=float(draws[0] if spacing is None else spacing),
        angle=float(draws[1] if angle is None else angle),
        wire_thickness=float(draws[2] if wire_thickness is None else wire_thickness),
        lattice_kind="rectangular",
        seed=int(rng.integers(2**31)),
        color=(wire, wire, wire),
    )
    fenced = composite(clean, fence, noise_sigma=noise_sigma, seed=int(rng.integers(2**31)))
    return clean, fenced, fence


# --- texel dataset ----------------------------------------------------------


def _split_counts(total: int, parts: int) -> list[int]:
    return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]


def _wire_midpoints(joints: np.ndarray, spacing: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Midpoints of adjacent joint pairs with the unit normal of their wire.

    These are the only wire points at full spacing/2 clearance from every
    joint, which makes them the hard negatives a texel classifier tends to
    confuse with crossings.
    """
    out = []
    for i in range(len(joints)):
        for j in range(i + 1, len(joints)):
            v = joints[j] - joints[i]
            dist = float(np.hypot(v[0], v[1]))
            if 0.0 < dist <= 1.4 * spacing:
                out.append(((joints[i] + joints[j]) / 2.0, np.array([-v[1], v[0]]) / dist))
    return out


def build_texel_dataset(
    scenes: list[tuple[Image, FenceLayer]],
    n_pos: int,
    n_neg: int,
    seed: int = 0,
    hard_negative_fraction: float = 0.5,
) -> TexelDataset:
    """Sample joint-centered positives and joint-free negatives from fenced scenes.

    Positives are 32x32 patches centered on a joint with +/-1 px jitter.
    Negative centers stay at least spacing/2 away from every joint; a
    configurable fraction is drawn near wire midpoints (wire but no joint)
    and the rest uniformly. Counts are met exactly or an error is raised.
    """
    if n_pos <= 0 or n_neg <= 0:
        raise ValueError("n_pos and n_neg must be positive")
    if not 0.0 <= hard_negative_fraction <= 1.0:
        raise ValueError("hard_negative_fraction must lie in [0, 1]")
    if not scenes:
        raise ValueError("no scenes given")
    for i, (_, layer) in enumerate(scenes):
        if not layer.joints:
            raise ValueError(f"scene {i} has no joints")

    side = 32
    rng = np.random.default_rng(seed)
    samples: list[tuple[Patch, int]] = []
    pos_per_scene = _split_counts(n_pos, len(scenes))
    neg_per_scene = _split_counts(n_neg, len(scenes))

    for (frame, layer), want_pos, want_neg in zip(scenes, pos_per_scene, neg_per_scene):
        joints = np.asarray(layer.joints, dtype=np.float64)
        half = side // 2
        lo_x, hi_x = half, frame.width - side + half  # inclusive center range
        lo_y, hi_y = half, frame.height - side + half

        got = 0
        for _ in range(200 * want_pos + 200):
            if got == want_pos:
                break
            jx, jy = joints[rng.integers(len(joints))]
            cx = int(round(jx)) + int(rng.integers(-1, 2))
            cy = int(round(jy)) + int(rng.integers(-1, 2))
            if lo_x <= cx <= hi_x and lo_y <= cy <= hi_y:
                samples.append((extract_patch(frame, (cx, cy), side), LABEL_JOINT))
                got += 1
        if got < want_pos:
            raise ValueError("could not place requested positive patches inside frame bounds")

        min_dist = layer.spacing / 2.0
        midpoints = _wire_midpoints(joints, layer.spacing)
        want_hard = round(want_neg * hard_negative_fraction) if midpoints else 0

        def neg_ok(cx: int, cy: int) -> bool:
            if not (lo_x <= cx <= hi_x and lo_y <= cy <= hi_y):
                return False
            return float(np.hypot(joints[:, 0] - cx, joints[:, 1] - cy).min()) >= min_dist

        got = 0
        for _ in range(1000 * want_hard + 1000):
            if got == want_hard:
                break
            mid, normal = midpoints[rng.integers(len(midpoints))]
            p = mid + normal * rng.uniform(-3.0, 3.0)
            cx, cy = int(round(p[0])), int(round(p[1]))
            if neg_ok(cx, cy):
                samples.append((extract_patch(frame, (cx, cy), side), LABEL_NONJOINT))
                got += 1

        for _ in range(1000 * want_neg + 1000):
            if got == want_neg:
                break
            cx = int(rng.integers(lo_x, hi_x + 1))
            cy = int(rng.integers(lo_y, hi_y + 1))
            if neg_ok(cx, cy):
                samples.append((extract_patch(frame, (cx, cy), side), LABEL_NONJOINT))
                got += 1
        if got < want_neg:
            raise ValueError("insufficient joint-free area for negative patches")

    return TexelDataset(samples)


def _mirror(patch: Patch) -> Patch:
    """Flip along the Y axis (reverse columns)."""
    return Patch(patch.planes[:, :, ::-1].copy(), origin=patch.origin)


def _corner_crop(patch: Patch, row0: int, col0: int, crop: int) -> Patch:
    return Patch(patch.planes[:, row0 : row0 + crop, col0 : col0 + crop].copy(), origin=patch.origin)


def augment(dataset: TexelDataset, include_flips: bool = True) -> TexelDataset:
    """Expand each sample into corner-crop and mirror variants, labels preserved.

    Emits the original plus four 26x26 corner crops resized back to 32x32,
    then the Y-axis mirror of each of those five (10 variants per input, or
    5 with ``include_flips=False``).
    """
    crop = 26
    out: list[tuple[Patch, int]] = []
    for patch, label in dataset.samples:
        if patch.side != 32:
            raise ValueError(f"augment expects 32x32 patches, got side {patch.side}")
        off = patch.side - crop
        variants = [
            patch,
            resize_bilinear(_corner_crop(patch, 0, 0, crop), 32),
            resize_bilinear(_corner_crop(patch, 0, off, crop), 32),
            resize_bilinear(_corner_crop(patch, off, 0, crop), 32),
            resize_bilinear(_corner_crop(patch, off, off, crop), 32),
        ]
        if include_flips:
            variants += [_mirror(v) for v in variants]
        out.extend((v, label) for v in variants)
    return TexelDataset(out)


# --- on-disk formats --------------------------------------------------------


def save_joints(joints: list[tuple[float, float]], path: str | Path) -> None:
    """Write one `x,y` pair per line, sub-pixel decimal."""
    lines = [f"{x:.4f},{y:.4f}" for x, y in joints]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_joints(path: str | Path) -> list[tuple[float, float]]:
    joints = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"{path}:{ln}: expected `x,y`, got {line!r}")
        joints.append((float(parts[0]), float(parts[1])))
    return joints


def save_texel_dataset(dataset: TexelDataset, directory: str | Path) -> None:
    """Write patches as PNGs plus a `manifest.txt` of `<relative-path>,<label>` lines."""
    directory = Path(directory)
    patch_dir = directory / "patches"
    patch_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (patch, label) in enumerate(dataset.samples):
        rel = f"patches/sample_{i:05d}.png"
        save_image(Image(patch.planes), directory / rel)
        lines.append(f"{rel},{label}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_texel_dataset(directory: str | Path) -> TexelDataset:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.is_file():
        raise OSError(f"no manifest.txt in {directory}")
    samples = []
    for ln, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        rel, _, label = line.rpartition(",")
        if label not in ("0", "1"):
            raise ValueError(f"{manifest}:{ln}: label must be 0 or 1")
        img = load_image(directory / rel)
        samples.append((Patch(img.planes), int(label)))
    return TexelDataset(samples)
