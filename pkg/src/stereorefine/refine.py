"""Depth refinement network: a small U-Net over [normalized baseline depth,
left image, warped right image] whose output is composed with the baseline
estimate through a residual head.

The multiplicative head Z = Z_a * (1 + f) lets the network express
corrections proportional to depth, matching the quadratic growth of
triangulation error; the additive head Z = Z_a + f exists as the ablation
arm. Training minimizes the range-invariant L1 between f and the relative
residual (Z_gt - Z_a) / Z_a, so gradient magnitudes do not scale with
distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import GradientTape, Tensor
from .block_match import fill_invalid
from .geometry import ScalarField
from .imaging import Image, WarpedImage

logger = logging.getLogger(__name__)

MIN_DEPTH_M = 1e-3  # floor applied after head composition


class HeadMode(Enum):
    MULTIPLICATIVE = 0
    ADDITIVE = 1

    @classmethod
    def parse(cls, name: str) -> "HeadMode":
        try:
            return {"mul": cls.MULTIPLICATIVE, "add": cls.ADDITIVE}[name]
        except KeyError:
            raise ValueError(f"head mode must be 'mul' or 'add', got {name!r}") from None


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    in_channels: int = 7   # depth + RGB left + RGB warped right
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("channel counts must be >= 1")


def _layer_channels(cfg: UNetConfig) -> list[tuple[str, int, int]]:
    """(name, in_channels, out_channels) for every conv, in forward order."""
    layers = []
    for i in range(cfg.levels):
        cin = cfg.in_channels if i == 0 else cfg.base_channels * 2 ** (i - 1)
        layers.append((f"enc{i}", cin, cfg.base_channels * 2 ** i))
    for i in range(cfg.levels - 1, -1, -1):
        up_ch = cfg.base_channels * 2 ** i  # channels arriving from below
        skip_ch = cfg.in_channels if i == 0 else cfg.base_channels * 2 ** (i - 1)
        out_ch = cfg.base_channels if i == 0 else cfg.base_channels * 2 ** (i - 1)
        layers.append((f"dec{i}", up_ch + skip_ch, out_ch))
    layers.append(("head", cfg.base_channels, 1))
    return layers


def parameter_count(cfg: UNetConfig) -> int:
    """Closed-form parameter total: 3x3 kernels plus one bias per filter."""
    return sum(cin * cout * 9 + cout for _, cin, cout in _layer_channels(cfg))


class RefineNetwork:
    """Parameter set plus architecture description of the refinement map.

    Encoder: `levels` stride-2 3x3 convs with leaky ReLU. Decoder: nearest
    x2 upsample, channel concat with the matching encoder-side features
    (the raw input at full resolution), 3x3 conv, leaky ReLU. The linear
    1-channel head is zero-initialized, so a fresh network refines nothing.
    """

    def __init__(self, cfg: UNetConfig, head: HeadMode,
                 params: dict[str, Tensor]):
        self.cfg = cfg
        self.head = head
        self.params = params

    @classmethod
    def from_tensors(cls, cfg: UNetConfig, head: HeadMode,
                     tensors: dict[str, np.ndarray],
                     dtype=np.float64) -> "RefineNetwork":
        expected = {}
        for name, cin, cout in _layer_channels(cfg):
            expected[f"{name}.weight"] = (cout, cin, 3, 3)
            expected[f"{name}.bias"] = (cout,)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
        params = {}
        for name, shape in expected.items():
            arr = np.asarray(tensors[name], dtype=dtype)
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(cfg, head, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def forward(self, tape: GradientTape, x: Tensor) -> Tensor:
        """Residual map f for input (B, in_channels, H, W); H and W must be
        divisible by 2**levels so decoder and skip resolutions line up."""
        cfg = self.cfg
        B, C, H, W = x.data.shape
        if C != cfg.in_channels:
            raise ValueError(f"input has {C} channels, network expects {cfg.in_channels}")
        div = 2 ** cfg.levels
        if H % div or W % div:
            raise ValueError(f"spatial size {H}x{W} not divisible by {div}")
        skips = [x]
        h = x
        for i in range(cfg.levels):
            h = tape.conv2d(h, self.params[f"enc{i}.weight"],
                            self.params[f"enc{i}.bias"], stride=2, padding=1)
            h = tape.leaky_relu(h, cfg.leaky_slope)
            skips.append(h)
        h = skips[-1]
        for i in range(cfg.levels - 1, -1, -1):
            up = tape.upsample_nearest2(h)
            cat = tape.concat_channels([up, skips[i]])
            h = tape.conv2d(cat, self.params[f"dec{i}.weight"],
                            self.params[f"dec{i}.bias"], stride=1, padding=1)
            h = tape.leaky_relu(h, cfg.leaky_slope)
        return tape.conv2d(h, self.params["head.weight"],
                           self.params["head.bias"], stride=1, padding=1)

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Forward pass on a throwaway tape; returns (B, 1, H, W) values."""
        return self.forward(GradientTape(), Tensor(x)).data


def build_unet(cfg: UNetConfig, seed: int,
               head: HeadMode = HeadMode.MULTIPLICATIVE,
               dtype=np.float64) -> RefineNetwork:
    """He-initialized network from a seeded generator; the output head is
    zero-initialized so the untrained network is the identity refinement.

    dtype=np.float32 is the training configuration (32-bit parameter
    storage); float64 is used for numerical verification.
    """
    rng = np.random.default_rng(np.random.PCG64(seed))
    tensors = {}
    for name, cin, cout in _layer_channels(cfg):
        if name == "head":
            w = np.zeros((cout, cin, 3, 3))
        else:
            w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (cin * 9))
        tensors[f"{name}.weight"] = w
        tensors[f"{name}.bias"] = np.zeros(cout)
    return RefineNetwork.from_tensors(cfg, head, tensors, dtype=dtype)


# -- input assembly and head composition ---------------------------------------

def prepare_inputs(z_a: ScalarField, left: Image, warped: WarpedImage,
                   z_cap: float = 100.0) -> Tensor:
    """Stack [depth / z_cap clamped to [0, 1.5], left, warped right] as a
    (1, C, H, W) constant tensor. Invalid depth pixels take their row-filled
    value, keeping the input dense; the loss mask governs training."""
    if z_cap <= 0:
        raise ValueError(f"z_cap must be > 0, got {z_cap}")
    h, w = z_a.height, z_a.width
    if (left.height, left.width) != (h, w) or (warped.image.height, warped.image.width) != (h, w):
        raise ValueError("depth, left image and warped image dimensions must match")
    z_dense = fill_invalid(z_a)
    ch0 = np.clip(z_dense.values / z_cap, 0.0, 1.5)
    planes = [ch0]
    planes += [left.values[:, :, c] for c in range(left.channels)]
    planes += [warped.image.values[:, :, c] for c in range(warped.image.channels)]
    return Tensor(np.stack(planes)[None])


def apply_head(z_a: ScalarField, f_out: ScalarField, mode: HeadMode) -> ScalarField:
    """Compose baseline depth with the network residual.

    multiplicative: Z = Z_a * (1 + f); additive: Z = Z_a + f. Output
    validity equals the baseline validity; depths are floored at 1 mm.
    """
    if (f_out.height, f_out.width) != (z_a.height, z_a.width):
        raise ValueError("residual and depth dimensions must match")
    if mode is HeadMode.MULTIPLICATIVE:
        z = z_a.values * (1.0 + f_out.values)
    else:
        z = z_a.values + f_out.values
    return ScalarField(np.maximum(z, MIN_DEPTH_M), z_a.valid.copy())


def residual_field(net_out: np.ndarray, like: ScalarField) -> ScalarField:
    """View a (1, 1, H, W) network output as a ScalarField over `like`'s mask."""
    vals = np.asarray(net_out).reshape(like.values.shape)
    return ScalarField(vals, like.valid.copy())


# -- losses -----------------------------------------------------------------------

def relative_residual(z_gt: np.ndarray, z_a: np.ndarray,
                      mask: np.ndarray) -> np.ndarray:
    """(z_gt - z_a) / z_a where masked, 0 elsewhere. z_a must be positive
    at masked pixels (the mask is required to exclude invalid baselines)."""
    out = np.zeros_like(z_gt)
    np.divide(z_gt - z_a, z_a, out=out, where=mask)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("mask admitted a pixel with non-positive baseline depth")
    return out


def build_loss_mask(z_gt: ScalarField, z_a_valid: np.ndarray, d_gt: ScalarField,
                    d_max: float, z_cap: float = 100.0) -> np.ndarray:
    """Training mask: valid ground truth and baseline, depth within z_cap,
    ground-truth disparity within the matcher's search range."""
    return (z_gt.valid & z_a_valid & d_gt.valid
            & (z_gt.values <= z_cap) & (d_gt.values <= d_max))


def _as_bchw(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return arr[None, None]
    if arr.ndim == 3:
        return arr[:, None]
    return arr


def masked_l1_to_target(tape: GradientTape, f_out: Tensor,
                        target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked mean |f_out - target|, differentiable through f_out only."""
    target4 = _as_bchw(np.asarray(target, dtype=np.float64))
    mask4 = _as_bchw(np.asarray(mask, dtype=bool))
    if not mask4.any():
        logger.warning("loss mask is empty; loss is 0 with zero gradients")
    diff = tape.sub(f_out, Tensor(target4))
    return tape.mean_abs(diff, mask4)


def loss_range_invariant(tape: GradientTape, z_gt: ScalarField, z_a: ScalarField,
                         f_out: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean |(z_gt - z_a)/z_a - f_out|: the relative-residual L1.

    Gradients are range invariant: a fixed relative depth error produces
    the same pull on f at any distance. z_a enters as a constant.
    """
    target = relative_residual(z_gt.values, z_a.values, np.asarray(mask, dtype=bool))
    return masked_l1_to_target(tape, f_out, target, mask)


def loss_direct_depth(tape: GradientTape, z_gt: ScalarField, z_a: ScalarField,
                      f_out: Tensor, mask: np.ndarray) -> Tensor:
    """Masked mean |z_gt - (z_a + f_out * z_a)|: plain depth L1, kept for
    comparison runs. Equals the range-invariant integrand scaled by z_a."""
    mask4 = _as_bchw(np.asarray(mask, dtype=bool))
    if not mask4.any():
        logger.warning("loss mask is empty; loss is 0 with zero gradients")
    za4 = Tensor(_as_bchw(z_a.values))
    diff = tape.sub(tape.mul(f_out, za4), Tensor(_as_bchw(z_gt.values - z_a.values)))
    return tape.mean_abs(diff, mask4)
