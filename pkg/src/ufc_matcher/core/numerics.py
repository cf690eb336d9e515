"""Dense array substrate for the matcher.

Arrays are torch tensors in channel-last layout (``h x w x c``). Reverse-mode
differentiation is torch autograd's eager tape: every op below records its gradient
rule as it runs, ``backward`` replays the tape once in reverse topological order, and
``grad_check`` validates the recorded rules against central differences.

Every op checks its shape contract up front and refuses to return NaN/Inf.
"""

import logging
import random
from collections.abc import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ufc_matcher.core.exceptions import (
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    NumericError,
)

logger = logging.getLogger(__name__)

Array = torch.Tensor

PRECISIONS: dict[str, torch.dtype] = {
    "float32": torch.float32,
    "float64": torch.float64,
}

# reduction order inside matmul and conv depends on the intra-op thread count
INTRA_OP_THREADS = 1


def set_precision(precision: str) -> torch.dtype:
    """Select the global floating dtype (float64 for checks, float32 for speed)."""
    try:
        dtype = PRECISIONS[precision]
    except KeyError as e:
        raise ConfigurationError(
            f"Unknown precision '{precision}'. Supported: {', '.join(PRECISIONS)}"
        ) from e
    torch.set_default_dtype(dtype)
    return dtype


def pin_intra_op_threads() -> None:
    """Fix torch's intra-op pool so results do not depend on the worker count."""
    torch.set_num_threads(INTRA_OP_THREADS)


def seed_everything(seed: int) -> None:
    """Seed every random source and pin deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def ensure_finite(x: Array, what: str) -> Array:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"Non-finite values produced by {what} (shape {tuple(x.shape)})")
    return x


def matmul(a: Array, b: Array) -> Array:
    """Matrix product of an ``m x k`` and a ``k x n`` array."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return ensure_finite(a @ b, "matmul")


def softmax(x: Array, axis: int = -1, temperature: float = 1.0) -> Array:
    """Softmax of ``x / temperature`` along ``axis`` (max-subtracted by torch)."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    return ensure_finite(torch.softmax(x / temperature, dim=axis), "softmax")


def layer_norm(x: Array, scale: Array, bias: Array, eps: float = 1e-5) -> Array:
    """Per-token normalization over the last axis followed by an affine map."""
    width = x.shape[-1]
    if scale.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm expects scale/bias of shape ({width},), "
            f"got {tuple(scale.shape)} and {tuple(bias.shape)}"
        )
    return ensure_finite(F.layer_norm(x, (width,), scale, bias, eps), "layer_norm")


def _check_odd(kh: int, kw: int) -> None:
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"Kernel extents must be odd, got {kh}x{kw}")


def conv2d(x: Array, kernel: Array, stride: int = 1, bias: Array | None = None) -> Array:
    """Same-padded 2D convolution.

    Args:
        x: ``h x w x cin`` input
        kernel: ``kh x kw x cin x cout`` weights
        stride: positive spatial stride; output extents are ``ceil(extent / stride)``
        bias: optional ``cout`` offsets

    Returns:
        ``ceil(h/stride) x ceil(w/stride) x cout`` array
    """
    if stride < 1:
        raise ConfigurationError(f"conv2d stride must be positive, got {stride}")
    if x.dim() != 3 or kernel.dim() != 4 or kernel.shape[2] != x.shape[2]:
        raise DimensionError(
            f"conv2d shape mismatch: input {tuple(x.shape)}, kernel {tuple(kernel.shape)}"
        )
    kh, kw = kernel.shape[0], kernel.shape[1]
    _check_odd(kh, kw)
    out = F.conv2d(
        x.permute(2, 0, 1).unsqueeze(0),
        kernel.permute(3, 2, 0, 1),
        bias=bias,
        stride=stride,
        padding=(kh // 2, kw // 2),
    )
    return ensure_finite(out[0].permute(1, 2, 0), "conv2d")


def plane_conv2d(planes: Array, kernel: Array) -> Array:
    """Apply one same-padded ``kh x kw`` kernel to each of ``n`` planes (``n x h x w``)."""
    if planes.dim() != 3 or kernel.dim() != 2:
        raise DimensionError(
            f"plane_conv2d expects n x h x w planes and a 2D kernel, "
            f"got {tuple(planes.shape)} and {tuple(kernel.shape)}"
        )
    kh, kw = kernel.shape
    _check_odd(kh, kw)
    out = F.conv2d(planes.unsqueeze(1), kernel[None, None], padding=(kh // 2, kw // 2))
    return ensure_finite(out[:, 0], "plane_conv2d")


def bilinear_resize(x: Array, out_h: int, out_w: int) -> Array:
    """Resize an ``h x w x c`` array with the align-corners-false convention."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"Resize target must be at least 1x1, got {out_h}x{out_w}")
    if x.dim() != 3:
        raise DimensionError(f"bilinear_resize expects h x w x c, got {tuple(x.shape)}")
    if (out_h, out_w) == tuple(x.shape[:2]):
        return x
    out = F.interpolate(
        x.permute(2, 0, 1).unsqueeze(0),
        size=(out_h, out_w),
        mode="bilinear",
        align_corners=False,
    )
    return ensure_finite(out[0].permute(1, 2, 0), "bilinear_resize")


def pixel_grid(h: int, w: int, dtype: torch.dtype | None = None) -> Array:
    """``h x w x 2`` grid of integer pixel positions as (x, y)."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    return torch.stack([xs, ys], dim=-1)


def bilinear_sample(x: Array, coords: Array) -> tuple[Array, Array]:
    """Sample ``x`` (``h x w x c``) at continuous (x, y) pixel coordinates.

    Pixel centers sit at integer coordinates. Coordinates outside the image are clamped
    to the border and flagged invalid in the returned ``n``-long boolean mask.
    """
    if x.dim() != 3 or coords.dim() != 2 or coords.shape[1] != 2:
        raise DimensionError(
            f"bilinear_sample expects h x w x c and n x 2, got {tuple(x.shape)} and {tuple(coords.shape)}"
        )
    h, w = x.shape[0], x.shape[1]
    cx, cy = coords[:, 0], coords[:, 1]
    mask = (cx >= 0) & (cx <= w - 1) & (cy >= 0) & (cy <= h - 1)
    cx = cx.clamp(0, w - 1)
    cy = cy.clamp(0, h - 1)
    gx = 2 * cx / (w - 1) - 1 if w > 1 else torch.zeros_like(cx)
    gy = 2 * cy / (h - 1) - 1 if h > 1 else torch.zeros_like(cy)
    grid = torch.stack([gx, gy], dim=-1).to(x.dtype)[None, None]
    out = F.grid_sample(
        x.permute(2, 0, 1).unsqueeze(0),
        grid,
        mode="bilinear",
        padding_mode="border",
        align_corners=True,
    )
    return ensure_finite(out[0, :, 0].transpose(0, 1), "bilinear_sample"), mask


def backward(loss: Array, params: nn.Module | None = None) -> None:
    """Replay the tape from a scalar loss, accumulating into parameter gradient slots."""
    if loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any registered parameter")
    ensure_finite(loss.detach(), "loss")
    loss.backward()
    if params is not None:
        for name, p in params.named_parameters():
            if p.grad is not None:
                ensure_finite(p.grad, f"gradient of {name}")


def _max_relative_error(analytic: Array, numeric: Array) -> float:
    diff = (analytic - numeric).abs()
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(diff, 1e-8))
    rel = diff / denom
    return float(rel.max()) if rel.numel() else 0.0


def grad_check(f: Callable[[Array], Array], x: Array, h: float = 1e-5) -> float:
    """Compare autograd against central differences for a scalar function of ``x``.

    Returns the maximum relative error with denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x = x.detach().clone().to(torch.float64).requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {tuple(y.shape)}")
    (analytic,) = torch.autograd.grad(y, x)

    numeric = torch.zeros_like(analytic).reshape(-1)
    probe = x.detach().clone()
    flat = probe.reshape(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            flat[idx] = orig + h
            f_plus = float(f(probe))
            flat[idx] = orig - h
            f_minus = float(f(probe))
            flat[idx] = orig
            numeric[idx] = (f_plus - f_minus) / (2 * h)
    return _max_relative_error(analytic.reshape(-1), numeric)


def grad_check_parameters(
    loss_fn: Callable[[], Array],
    module: nn.Module,
    h: float = 1e-5,
    samples_per_parameter: int | None = None,
    seed: int = 0,
) -> float:
    """Central-difference check of ``loss_fn`` against every parameter of ``module``.

    When ``samples_per_parameter`` is set, only that many seeded coordinates of each
    parameter are probed.
    """
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    backward(loss, module)

    generator = torch.Generator().manual_seed(seed)
    worst, worst_name = 0.0, ""
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"Parameter '{name}' received no gradient")
        flat = p.data.reshape(-1)
        if samples_per_parameter is None or samples_per_parameter >= flat.numel():
            indices = torch.arange(flat.numel())
        else:
            indices = torch.randperm(flat.numel(), generator=generator)[:samples_per_parameter]
        analytic = p.grad.reshape(-1)[indices].detach().clone()
        numeric = torch.zeros_like(analytic)
        with torch.no_grad():
            for pos, idx in enumerate(indices.tolist()):
                orig = float(flat[idx])
                flat[idx] = orig + h
                f_plus = float(loss_fn())
                flat[idx] = orig - h
                f_minus = float(loss_fn())
                flat[idx] = orig
                numeric[pos] = (f_plus - f_minus) / (2 * h)
        err = _max_relative_error(analytic, numeric)
        if err > worst:
            worst, worst_name = err, name
    logger.debug(f"grad_check_parameters worst relative error {worst:.3e} at {worst_name}")
    return worst


def make_optimizer(
    params: nn.Module,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-4,
) -> torch.optim.AdamW:
    """AdamW over the trainable parameters of ``params`` (decoupled weight decay)."""
    trainable = [p for p in params.parameters() if p.requires_grad]
    return torch.optim.AdamW(
        trainable, lr=lr, betas=(beta1, beta2), eps=eps, weight_decay=weight_decay
    )


def adamw_step(params: nn.Module, optimizer: torch.optim.AdamW) -> None:
    """Apply one AdamW update; every trainable parameter must hold a gradient."""
    for name, p in params.named_parameters():
        if p.requires_grad and p.grad is None:
            raise ContractError(f"Missing gradient for parameter '{name}'")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def parameter_count(params: nn.Module) -> int:
    return sum(p.numel() for p in params.parameters())
