"""Desk-scale stereo depth laboratory.

Synthetic rectified stereo pairs with analytic ground truth, a census
block-matching baseline, triangulated depth, and a small learned
multiplicative-residual refinement network trained under a range-invariant
loss, plus the evaluation stack that measures how the refinement flattens
the quadratic growth of depth error with distance.
"""

from .geometry import (CameraRig, ScalarField, depth_to_disparity,
                       disparity_to_depth, exact_depth_error,
                       predicted_depth_error)
from .imaging import Image, WarpedImage, bilinear_sample, shading_image, warp_right_to_left
from .scenegen import SceneSpec, StereoSample, generate_dataset, generate_scene
from .block_match import MatchParams, census_transform, compute_disparity, fill_invalid
from .autodiff import GradientTape, Tensor, grad_check
from .refine import (HeadMode, RefineNetwork, UNetConfig, apply_head,
                     build_unet, loss_direct_depth, loss_range_invariant,
                     prepare_inputs)
from .trainer import AdamState, TrainConfig, adam_step, train
from .evaluator import (EvalReport, analyze, bin_median_errors, d1_rate, epe,
                        eval_mask, evaluate, mean_abs_depth_error, quadfit,
                        refined_disparity)
from .io_formats import (Manifest, ManifestEntry, ingest_external_disparity,
                         load_checkpoint, read_manifest, read_pfm, read_pgm,
                         read_ppm, save_checkpoint, write_manifest, write_pfm,
                         write_pgm, write_ppm)

__version__ = "0.1.0"
