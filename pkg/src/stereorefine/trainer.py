"""Adam training loop for the refinement network.

Samples are precomputed once (network input stack, relative-residual
target, loss mask) since none of them depend on the evolving parameters;
epochs then touch only network compute. Everything downstream of the run
seed is deterministic: batch order, horizontal-flip augmentation and
parameter updates replay bit-identically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import GradientTape, Tensor
from .block_match import MatchParams, compute_disparity, fill_invalid
from .geometry import disparity_to_depth
from .imaging import warp_right_to_left
from .io_formats import (Manifest, load_sample, read_manifest, save_checkpoint,
                         write_manifest)
from .refine import (HeadMode, RefineNetwork, UNetConfig, build_loss_mask,
                     build_unet, prepare_inputs, relative_residual)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    head: HeadMode = HeadMode.MULTIPLICATIVE
    seed: int = 0
    z_cap: float = 100.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("adam_beta1", "adam_beta2"):
            b = getattr(self, name)
            if not (0.0 <= b < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {b}")


@dataclass
class AdamState:
    """First/second moment estimates mirroring the parameter set."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "AdamState":
        # moments always in 64-bit, whatever the parameter storage dtype
        return cls(m={k: np.zeros(t.data.shape) for k, t in params.items()},
                   v={k: np.zeros(t.data.shape) for k, t in params.items()})


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


@dataclass
class _Prepared:
    """Per-sample constants for the whole run."""

    x: np.ndarray        # (C, H, W) network input
    target: np.ndarray   # (H, W) relative residual
    mask: np.ndarray     # (H, W) loss mask
    z_a: np.ndarray      # (H, W) dense baseline depth
    z_gt: np.ndarray     # (H, W)


def _prepare_sample(sample, rig, d_max: float, z_cap: float) -> _Prepared:
    d_base = sample.d_baseline
    z_a = disparity_to_depth(d_base, rig)
    z_dense = fill_invalid(z_a)
    warped = warp_right_to_left(sample.right, d_base)
    x = prepare_inputs(z_a, sample.left, warped, z_cap)
    mask = build_loss_mask(sample.z_gt, z_a.valid, sample.d_gt, d_max, z_cap)
    mask &= sample.valid
    target = relative_residual(sample.z_gt.values, z_dense.values, mask)
    # 32-bit storage for everything the hot loop touches
    return _Prepared(x=x.data[0].astype(np.float32),
                     target=target.astype(np.float32), mask=mask,
                     z_a=z_dense.values, z_gt=sample.z_gt.values)


def _flip(p: _Prepared) -> _Prepared:
    return _Prepared(x=p.x[:, :, ::-1].copy(), target=p.target[:, ::-1].copy(),
                     mask=p.mask[:, ::-1].copy(), z_a=p.z_a[:, ::-1].copy(),
                     z_gt=p.z_gt[:, ::-1].copy())


def _val_depth_error(net: RefineNetwork, prepared: list[_Prepared],
                     head: HeadMode) -> float:
    """Pixel-pooled mean |Z - Z_gt| over the validation masks."""
    total = 0.0
    count = 0
    for p in prepared:
        f = net.infer(p.x[None])[0, 0]
        if head is HeadMode.MULTIPLICATIVE:
            z = p.z_a * (1.0 + f)
        else:
            z = p.z_a + f
        z = np.maximum(z, 1e-3)
        total += np.abs(z - p.z_gt)[p.mask].sum()
        count += int(p.mask.sum())
    return total / count if count else 0.0


def _ensure_baselines(manifest: Manifest, manifest_path: Path,
                      d_max: Optional[int]) -> int:
    """Resolve d_max and compute missing baseline disparities on the fly."""
    from . import io_formats

    if d_max is None:
        d_max = manifest.d_max
    missing = [e for e in manifest.entries if e.d_baseline is None]
    if missing:
        if d_max is None:
            raise ValueError("manifest carries no d_max and none was given; "
                             "run the baseline step first or pass d_max")
        logger.info("computing block-matching baseline for %d samples", len(missing))
        params = MatchParams(d_max=int(d_max))
        root = manifest_path.parent
        for e in manifest.entries:
            if e.d_baseline is not None:
                continue
            s = load_sample(root, e)
            d = compute_disparity(s.left, s.right, params)
            rel = f"{e.sample_dir}/d_baseline.pfm"
            io_formats.write_pfm(d, root / rel)
            e.d_baseline = rel
        manifest.d_max = int(d_max)
        write_manifest(manifest, manifest_path)
    if d_max is None:
        raise ValueError("manifest carries no d_max; rerun the baseline step")
    return int(d_max)


def train(manifest_path, cfg: TrainConfig, ckpt_out,
          log_csv=None, arch: Optional[UNetConfig] = None,
          d_max: Optional[int] = None) -> Path:
    """Train on a dataset manifest; writes final and best checkpoints.

    The best checkpoint (suffix .best) minimizes depth error on a held-out
    10% validation split. Returns the final checkpoint path. The training
    log CSV has one `epoch,train_loss,val_depth_error_m` row per epoch.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    if not manifest.entries:
        raise ValueError("empty dataset manifest")
    d_max = _ensure_baselines(manifest, manifest_path, d_max)
    root = manifest_path.parent

    # one sample in flight at a time; only the compact prepared form is kept
    prepared = [_prepare_sample(load_sample(root, e), manifest.rig, d_max, cfg.z_cap)
                for e in manifest.entries]

    if arch is None:
        in_ch = prepared[0].x.shape[0]
        arch = UNetConfig(in_channels=in_ch)
    net = build_unet(arch, cfg.seed, cfg.head, dtype=np.float32)
    state = AdamState.for_params(net.params)

    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    order = rng.permutation(len(prepared))
    n_val = max(1, round(0.1 * len(prepared))) if len(prepared) > 1 else 0
    val_idx = order[len(prepared) - n_val:]
    train_idx = order[:len(prepared) - n_val]
    if len(train_idx) == 0:
        train_idx = order
    val_set = [prepared[i] for i in val_idx]

    param_names = list(net.params)
    best_val = np.inf
    best_params: Optional[dict[str, np.ndarray]] = None
    log_rows = ["epoch,train_loss,val_depth_error_m"]

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(train_idx)
        flips = rng.random(len(perm)) < 0.5
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, len(perm), cfg.batch_size):
            chunk = perm[start:start + cfg.batch_size]
            batch = [_flip(prepared[i]) if flips[start + j] else prepared[i]
                     for j, i in enumerate(chunk)]
            x = Tensor(np.stack([b.x for b in batch]))
            target = np.stack([b.target for b in batch])[:, None]
            mask = np.stack([b.mask for b in batch])[:, None]

            tape = GradientTape()
            f_out = net.forward(tape, x)
            loss = tape.mean_abs(tape.sub(f_out, Tensor(target)), mask)
            grads = tape.gradients(loss, net.parameters())
            adam_step(net.params, dict(zip(param_names, grads)), state, cfg)

            loss_sum += float(loss.data)
            n_batches += 1
        for p in net.parameters():
            if not np.all(np.isfinite(p.data)):
                raise RuntimeError(f"non-finite parameters after epoch {epoch}; "
                                   f"lower the learning rate")
        train_loss = loss_sum / n_batches
        val_err = _val_depth_error(net, val_set, cfg.head) if val_set else train_loss
        if val_err < best_val:
            best_val = val_err
            best_params = {k: t.data.copy() for k, t in net.params.items()}
        log_rows.append(f"{epoch},{train_loss!r},{val_err!r}")
        logger.info("epoch %d/%d  train_loss=%.6f  val_depth_error=%.4f m",
                    epoch, cfg.epochs, train_loss, val_err)

    ckpt_out = Path(ckpt_out)
    ckpt_out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, ckpt_out)
    if best_params is not None:
        best_net = RefineNetwork.from_tensors(arch, cfg.head, best_params)
        save_checkpoint(best_net, ckpt_out.with_name(ckpt_out.name + ".best"))
    if log_csv is not None:
        Path(log_csv).parent.mkdir(parents=True, exist_ok=True)
        Path(log_csv).write_text("\n".join(log_rows) + "\n", encoding="utf-8")
    return ckpt_out
