"""Video-based image de-fencing.

Pipeline: detect fence joints with a small convolutional classifier, connect
them into per-frame occlusion masks, estimate inter-frame motion, and fuse
the frames into a de-fenced image with a split Bregman TV solver.
"""

from .image import (
    FenceMask,
    Image,
    Patch,
    extract_patch,
    load_image,
    load_mask,
    psnr,
    resize_bilinear,
    save_image,
    save_mask,
    ssim,
)
from .synth import (
    FenceLayer,
    TexelDataset,
    augment,
    build_texel_dataset,
    composite,
    generate_fence,
    shift_image,
    textured_background,
)
from .cnn import CnnArch, CnnModel, TrainConfig, TrainReport, forward, gradient_check, init_model, train
from .detector import JointDetections, apply_manual_edits, cluster, connect_joints, eval_detection, scan
from .motion import MotionField, WarpOperator, build_warp, estimate_translation, load_flow, write_flow
from .fusion import ConvergenceTrace, Observation, SolverParams, defence, grad, div, objective, shrink

__version__ = "0.1.0"
