"""Command-line pipelines: synthesize sequences, build datasets, train the
texel classifier, detect fences, and run the de-fencing solver.

Every command is deterministic for fixed (arguments, seed, inputs) and
writes its effective configuration next to its outputs. A config file of
flat key=value lines can pre-set any flag; explicit flags win.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import cnn, detector, fusion, motion, synth
from .image import Image, load_image, load_mask, psnr, save_image, save_mask, ssim

PAPER_SHIFTS = "-5,-5;2,2;10,10"


def _parse_shifts(text: str) -> list[tuple[int, int]]:
    shifts = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        nums = part.split(",")
        if len(nums) != 2:
            raise ValueError(f"bad shift {part!r}; expected dx,dy")
        shifts.append((int(nums[0]), int(nums[1])))
    return shifts


def _write_effective_config(args: argparse.Namespace, out_dir: Path, command: str) -> None:
    skip = {"func", "command", "config", "dry_run"}
    lines = []
    for key in sorted(vars(args)):
        if key in skip:
            continue
        value = getattr(args, key)
        if isinstance(value, list):
            value = ";".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    (out_dir / f"config_{command}.txt").write_text("\n".join(lines) + "\n")


def _say(args: argparse.Namespace, message: str) -> None:
    if not args.quiet:
        print(message)


def _frame_paths(specs: list[str], pattern: str = "frame_*.png") -> list[Path]:
    """Expand a directory into its sorted numbered files, or take paths as given."""
    if len(specs) == 1 and Path(specs[0]).is_dir():
        paths = sorted(Path(specs[0]).glob(pattern))
        if not paths:
            raise OSError(f"no {pattern} files in {specs[0]}")
        return paths
    return [Path(s) for s in specs]


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- synth ---------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    shifts = [(0, 0)] + _parse_shifts(args.shifts)
    if args.background:
        clean = load_image(args.background)
    else:
        clean = synth.textured_background(args.width, args.height, args.channels, seed=args.seed)
    color = (args.wire_color,) * 3 if args.wire_color is not None else None
    fence = synth.generate_fence(
        clean.width,
        clean.height,
        spacing=args.spacing,
        angle=args.angle,
        wire_thickness=args.thickness,
        lattice_kind=args.kind,
        seed=args.seed,
        color=color,
    )
    if args.dry_run:
        _say(args, f"dry-run ok: {len(shifts)} frames, {len(fence.joints)} joints")
        return 0

    out = _out_dir(args)
    save_image(clean, out / "clean.png")
    for i, shift in enumerate(shifts):
        frame = synth.composite(
            synth.shift_image(clean, shift), fence, noise_sigma=args.noise_sigma, seed=args.seed + 7 * i
        )
        save_image(frame, out / f"frame_{i:03d}.png")
        save_mask(fence.mask, out / f"mask_{i:03d}.png")
    synth.save_joints(fence.joints, out / "joints.txt")
    (out / "shifts.txt").write_text("\n".join(f"{dx},{dy}" for dx, dy in shifts) + "\n")
    _write_effective_config(args, out, "synth")
    _say(
        args,
        f"wrote {len(shifts)} frames + masks, {len(fence.joints)} joints, "
        f"fence coverage {fence.mask.coverage():.1%} -> {out}",
    )
    return 0


# --- dataset ---------------------------------------------------------------------


def _build_scene_dataset(
    n_scenes: int, size: int, n_pos: int, n_neg: int, hard_frac: float, flips: bool, seed: int
) -> synth.TexelDataset:
    scenes = []
    for i in range(n_scenes):
        _, fenced, layer = synth.random_scene(size, size, seed=seed * 1000 + i)
        scenes.append((fenced, layer))
    base = synth.build_texel_dataset(scenes, n_pos, n_neg, seed=seed, hard_negative_fraction=hard_frac)
    return synth.augment(base, include_flips=flips)


def cmd_dataset(args: argparse.Namespace) -> int:
    dataset = _build_scene_dataset(
        args.scenes, args.size, args.n_pos, args.n_neg, args.hard_frac, not args.no_flip, args.seed
    )
    if args.dry_run:
        _say(args, f"dry-run ok: {len(dataset)} samples")
        return 0
    out = _out_dir(args)
    synth.save_texel_dataset(dataset, out)
    _write_effective_config(args, out, "dataset")
    _say(args, f"wrote {len(dataset)} patches ({dataset.n_positive} joint) -> {out}")
    return 0


# --- train ----------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    if args.dataset:
        dataset = synth.load_texel_dataset(args.dataset)
    else:
        dataset = _build_scene_dataset(
            args.scenes, args.size, args.n_pos, args.n_neg, args.hard_frac, True, args.seed
        )

    holdout: synth.TexelDataset | None = None
    if args.holdout > 0.0:
        rng = np.random.default_rng(args.seed)
        order = rng.permutation(len(dataset.samples))
        n_hold = max(1, int(round(args.holdout * len(order))))
        hold_idx = set(order[:n_hold].tolist())
        holdout = synth.TexelDataset([dataset.samples[i] for i in sorted(hold_idx)])
        dataset = synth.TexelDataset(
            [s for i, s in enumerate(dataset.samples) if i not in hold_idx]
        )

    if args.dry_run:
        _say(args, f"dry-run ok: {len(dataset)} training samples")
        return 0

    model = cnn.init_model(args.seed)
    config = cnn.TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr, seed=args.seed
    )
    trained, report = cnn.train(model, dataset, config)

    out = _out_dir(args)
    cnn.save_model(trained, out / "model.txt")
    csv = ["epoch,mse"] + [f"{i + 1},{m!r}" for i, m in enumerate(report.per_epoch_mse)]
    (out / "mse_per_epoch.csv").write_text("\n".join(csv) + "\n")
    _write_effective_config(args, out, "train")
    _say(args, f"trained {config.epochs} epochs, final MSE {report.final_mse:.4g} -> {out}")

    if holdout is not None:
        x, t = cnn._dataset_arrays(holdout, trained.arch.input_side)
        scores = cnn.forward_batch(trained, x)
        accuracy = float(((scores[:, 0] > scores[:, 1]).astype(float) == t[:, 0]).mean())
        _say(args, f"held-out accuracy: {accuracy:.4f} ({len(holdout)} samples)")
    return 0


# --- detect ----------------------------------------------------------------------


def cmd_detect(args: argparse.Namespace) -> int:
    model = cnn.load_model(args.model)
    frames = _frame_paths(args.frames)
    for p in frames:
        if not p.is_file():
            raise OSError(f"missing frame {p}")
    edits = detector.parse_edits(Path(args.edits).read_text()) if args.edits else []
    truth = synth.load_joints(args.eval) if args.eval else None

    if args.dry_run:
        _say(args, f"dry-run ok: {len(frames)} frames")
        return 0

    out = _out_dir(args)
    totals = np.zeros(3)
    for i, path in enumerate(frames):
        frame = load_image(path)
        det = detector.scan(model, frame, threshold=args.threshold, stride=args.stride,
                            cluster_radius=args.cluster_radius)
        if args.thickness == "auto":
            thickness = detector.estimate_wire_thickness(frame, det.joints)
        else:
            thickness = float(args.thickness)
        mask = detector.connect_joints(
            det.joints,
            (frame.width, frame.height),
            wire_thickness=thickness,
            link_radius=args.link_radius,
            neighbors_max=args.neighbors,
            extend_to_border=not args.no_extend_border,
        )
        if edits:
            mask = detector.apply_manual_edits(mask, edits)
        save_mask(mask, out / f"mask_{i:03d}.png")
        synth.save_joints(det.joints, out / f"joints_{i:03d}.txt")
        _say(
            args,
            f"frame {i}: {det.windows_scanned} windows scanned, {len(det.raw_hits)} hits, "
            f"{len(det.joints)} joints, thickness {thickness:.1f}",
        )
        if truth is not None:
            p, r, f = detector.eval_detection(det.joints, truth, tolerance=args.tol)
            totals += (p, r, f)
            _say(args, f"frame {i}: precision {p:.4f} recall {r:.4f} F {f:.4f} (tol {args.tol})")
    if truth is not None and frames:
        p, r, f = totals / len(frames)
        _say(args, f"mean over frames: precision {p:.4f} recall {r:.4f} F {f:.4f}")
    _write_effective_config(args, out, "detect")
    return 0


# --- defence ----------------------------------------------------------------------


def _load_masks(args: argparse.Namespace, frames: list[Path], images: list[Image]):
    if args.masks:
        paths = _frame_paths(args.masks, "mask_*.png")
        if len(paths) != len(images):
            raise ValueError(f"{len(paths)} masks for {len(images)} frames")
        return [load_mask(p) for p in paths]
    if args.model:
        model = cnn.load_model(args.model)
        masks = []
        for img in images:
            det = detector.scan(model, img, threshold=args.threshold, stride=args.stride)
            thickness = detector.estimate_wire_thickness(img, det.joints)
            masks.append(
                detector.connect_joints(
                    det.joints, (img.width, img.height), wire_thickness=thickness,
                    extend_to_border=True,
                )
            )
        return masks
    return [None] * len(images)


def _motion_warps(args: argparse.Namespace, frames: list[Path], images: list[Image], masks) -> list:
    dims = (images[0].width, images[0].height)
    if args.flow:
        if len(args.flow) != len(images) - 1:
            raise ValueError(f"{len(args.flow)} flow files for {len(images) - 1} non-reference frames")
        return [motion.WarpOperator.identity(dims)] + [
            motion.build_warp(motion.load_flow(p, dims), dims) for p in args.flow
        ]
    if args.shifts or args.known_motion:
        if args.shifts:
            shifts = _parse_shifts(args.shifts)
        else:
            shift_file = frames[0].parent / "shifts.txt"
            if not shift_file.is_file():
                raise OSError(f"--known-motion needs {shift_file}")
            shifts = _parse_shifts(";".join(shift_file.read_text().split()))
            if len(shifts) == len(images):
                shifts = shifts[1:]  # leading reference entry
        if len(shifts) != len(images) - 1:
            raise ValueError(f"{len(shifts)} shifts for {len(images) - 1} non-reference frames")
        return [motion.WarpOperator.identity(dims)] + [motion.warp_from_shift(s, dims) for s in shifts]
    # default: estimate a global translation per non-reference frame
    warps = [motion.WarpOperator.identity(dims)]
    for i in range(1, len(images)):
        exclude = (masks[0], masks[i]) if masks[0] is not None and masks[i] is not None else None
        shift = motion.estimate_translation(images[0], images[i], exclude=exclude, max_disp=args.max_disp)
        _say(args, f"frame {i}: estimated shift ({shift[0]:.2f}, {shift[1]:.2f})")
        warps.append(motion.warp_from_shift(shift, dims))
    return warps


def cmd_defence(args: argparse.Namespace) -> int:
    frames = _frame_paths(args.frames)
    images = [load_image(p) for p in frames]
    if not images:
        raise ValueError("no frames given")
    masks = _load_masks(args, frames, images)
    warps = _motion_warps(args, frames, images, masks)

    params = fusion.SolverParams(
        mu=args.mu,
        lam=getattr(args, "lambda"),
        outer_iters=args.outer,
        inner_iters=args.inner,
        step=args.step,
        tol=args.tol,
        shrink_threshold=(
            args.shrink_mode if args.shrink_mode in ("derived", "paper") else float(args.shrink_mode)
        ),
    )
    obs = [
        fusion.Observation(img, m.keep_weights() if m is not None else np.ones((img.height, img.width)), w)
        for img, m, w in zip(images, masks, warps)
    ]
    if args.dry_run:
        _say(args, f"dry-run ok: {len(obs)} observations")
        return 0

    result, trace = fusion.defence(obs, params)
    out = _out_dir(args)
    save_image(result, out / "defenced.png")
    trace.to_csv(out / "trace.csv")
    _write_effective_config(args, out, "defence")
    _say(
        args,
        f"defenced {len(obs)} frames in {len(trace)} outer iterations, "
        f"{trace.uncovered_pixels} uncovered pixels -> {out}",
    )
    if args.psnr_ref:
        ref = load_image(args.psnr_ref)
        _say(args, f"PSNR {psnr(result, ref):.2f} dB  SSIM {ssim(result, ref):.4f}")
    return 0


# --- eval -----------------------------------------------------------------------


def cmd_eval(args: argparse.Namespace) -> int:
    did = False
    if args.pred and args.truth:
        p, r, f = detector.eval_detection(
            synth.load_joints(args.pred), synth.load_joints(args.truth), tolerance=args.tol
        )
        print(f"precision {p:.4f} recall {r:.4f} F {f:.4f}")
        did = True
    if args.test and args.ref:
        a = load_image(args.test)
        b = load_image(args.ref)
        print(f"PSNR {psnr(a, b):.2f} dB  SSIM {ssim(a, b):.4f}")
        did = True
    if not did:
        raise ValueError("eval needs --pred/--truth joints files and/or --test/--ref images")
    return 0


# --- parser -----------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser, out_required: bool = True) -> None:
    sub.add_argument("--seed", type=int, default=0, help="seed for all randomized steps")
    sub.add_argument("--config", type=str, default=None, help="key=value file of flag defaults")
    if out_required:
        sub.add_argument("--out", type=str, required=True, help="output directory")
    sub.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub.add_argument("--dry-run", action="store_true", help="validate arguments, write nothing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defencing", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a fenced multi-frame sequence with ground truth")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--channels", type=int, default=1, choices=(1, 3))
    p.add_argument("--spacing", type=float, default=24.0)
    p.add_argument("--angle", type=float, default=8.0)
    p.add_argument("--thickness", type=float, default=3.0)
    p.add_argument("--kind", choices=("rectangular", "diamond"), default="rectangular")
    p.add_argument("--wire-color", type=float, default=None, help="wire intensity; default seeded")
    p.add_argument("--noise-sigma", type=float, default=0.02, help="wire rendering noise")
    p.add_argument("--shifts", type=str, default=PAPER_SHIFTS, help="dx,dy;dx,dy;... for extra frames")
    p.add_argument("--background", type=str, default=None, help="background image (default: synthetic texture)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dataset", help="build a texel training dataset on disk")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--size", type=int, default=160, help="scene side in pixels")
    p.add_argument("--n-pos", type=int, default=80)
    p.add_argument("--n-neg", type=int, default=160)
    p.add_argument("--hard-frac", type=float, default=0.35, help="fraction of wire-midpoint negatives")
    p.add_argument("--no-flip", action="store_true", help="augment without mirrored variants")
    _add_common(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train the texel classifier")
    p.add_argument("--dataset", type=str, default=None, help="dataset directory (default: synthesize)")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--size", type=int, default=160)
    p.add_argument("--n-pos", type=int, default=160)
    p.add_argument("--n-neg", type=int, default=320)
    p.add_argument("--hard-frac", type=float, default=0.35)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--holdout", type=float, default=0.0, help="fraction held out for an accuracy report")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect fence masks in frames")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--frames", type=str, nargs="+", required=True, help="frame files or one directory")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--cluster-radius", type=float, default=8.0)
    p.add_argument("--link-radius", type=float, default=None)
    p.add_argument("--neighbors", type=int, default=4)
    p.add_argument("--thickness", type=str, default="auto", help="wire thickness in px, or 'auto'")
    p.add_argument("--no-extend-border", action="store_true", help="do not extend wires to the frame border")
    p.add_argument("--edits", type=str, default=None, help="manual mask edits file")
    p.add_argument("--eval", type=str, default=None, help="ground-truth joints file to score against")
    p.add_argument("--tol", type=float, default=8.0, help="matching tolerance for --eval")
    _add_common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("defence", help="fuse frames into a de-fenced image")
    p.add_argument("--frames", type=str, nargs="+", required=True, help="frame files or one directory")
    p.add_argument("--masks", type=str, nargs="+", default=None, help="mask files or one directory")
    p.add_argument("--model", type=str, default=None, help="detector model when masks are absent")
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--flow", type=str, nargs="+", default=None, help="dense flow file per non-reference frame")
    p.add_argument("--shifts", type=str, default=None, help="known shifts dx,dy;... per non-reference frame")
    p.add_argument("--known-motion", action="store_true", help="read shifts.txt from the frames directory")
    p.add_argument("--max-disp", type=int, default=20, help="search range for motion estimation")
    p.add_argument("--mu", type=float, default=0.01)
    p.add_argument("--lambda", type=float, default=1e-5, dest="lambda")
    p.add_argument("--outer", type=int, default=50)
    p.add_argument("--inner", type=int, default=20)
    p.add_argument("--step", type=float, default=None, help="fixed descent step (default: backtracking)")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--shrink-mode", type=str, default="derived", help="derived | paper | explicit value")
    p.add_argument("--psnr-ref", type=str, default=None, help="clean image to report PSNR/SSIM against")
    _add_common(p)
    p.set_defaults(func=cmd_defence)

    p = sub.add_parser("eval", help="score joints files or compare images")
    p.add_argument("--pred", type=str, default=None)
    p.add_argument("--truth", type=str, default=None)
    p.add_argument("--tol", type=float, default=8.0)
    p.add_argument("--test", type=str, default=None)
    p.add_argument("--ref", type=str, default=None)
    _add_common(p, out_required=False)
    p.set_defaults(func=cmd_eval)

    return parser


def _inject_config(argv: list[str]) -> list[str]:
    """Expand `--config file` into flags placed before the user's own flags."""
    if "--config" not in argv:
        return argv
    path = Path(argv[argv.index("--config") + 1])
    if not path.is_file():
        raise OSError(f"no config file {path}")
    flags: list[str] = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value")
        key, value = line.split("=", 1)
        flag = "--" + key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                flags.append(flag)
        elif value.lower() in ("none", ""):
            continue
        else:
            flags.append(flag)
            flags.append(value)
    for i, token in enumerate(argv):
        if not token.startswith("-"):
            return argv[: i + 1] + flags + argv[i + 1 :]
    return argv + flags


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_inject_config(argv))
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"defencing: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
