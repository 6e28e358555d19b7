"""Shared constructors for tests."""

import numpy as np

from v2lab.core import Mask
from v2lab.features import FeatureGrid


def small_grid(rng, dim, rows, cols, patch_size=4, normalize=True):
    data = rng.normal(size=(dim, rows, cols)).astype(np.float32)
    if normalize:
        data /= np.linalg.norm(data, axis=0, keepdims=True)
    return FeatureGrid(data, patch_size, rows * patch_size, cols * patch_size)


def box_mask(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return Mask(m)


def shift_mask(m: np.ndarray, dx: int, dy: int = 0) -> np.ndarray:
    """Translate a boolean mask by whole pixels, dropping what leaves the frame."""
    out = np.zeros_like(m)
    h, w = m.shape
    ys, xs = np.nonzero(m)
    ys, xs = ys + dy, xs + dx
    keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
    out[ys[keep], xs[keep]] = True
    return out


def central_difference(fn, param, eps=1e-6, index=None):
    """Numerical gradient of scalar ``fn()`` w.r.t. a torch parameter, entry by entry.

    ``index`` optionally restricts the check to some flat positions; other entries are NaN.
    """
    import torch

    flat = param.data.view(-1)
    grad = torch.full_like(flat, float("nan"))
    positions = range(flat.numel()) if index is None else index
    with torch.no_grad():
        for i in positions:
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            grad[i] = (up - down) / (2 * eps)
    return grad.view_as(param)


def relative_error(analytic, numeric, floor=1e-8):
    """Entry-wise |a - n| / max(|a|, |n|, floor), maximum over checked entries."""
    import torch

    keep = ~torch.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    return (torch.abs(a - n) / torch.clamp(torch.maximum(a.abs(), n.abs()), min=floor)).max().item()
