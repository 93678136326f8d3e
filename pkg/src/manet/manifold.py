"""Manifold generator: boundary (2D) / surface (3D) maps from label maps.

Label values are convolved as plain real numbers. All filters use
replicate padding so outputs keep the input shape and constant regions
touching the border produce no response.
"""

import numpy as np
from scipy import ndimage

SOBEL_X_2D = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y_2D = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], dtype=np.float64)

_SMOOTH_3D = np.array([[1, 3, 1], [3, 6, 3], [1, 3, 1]], dtype=np.float64)
# derivative along axis 0: slices -S, 0, +S
SOBEL_X_3D = np.stack([-_SMOOTH_3D, np.zeros((3, 3)), _SMOOTH_3D])
SOBEL_Y_3D = np.moveaxis(SOBEL_X_3D, 0, 1)
SOBEL_Z_3D = np.moveaxis(SOBEL_X_3D, 0, 2)

OPERATORS = ("sobel", "canny")
CANNY_DEFAULTS = {"sigma": 1.0, "t_low": 0.1, "t_high": 0.2}


class ManifoldError(ValueError):
    pass


def correlate_replicate(values, kernel):
    """Cross-correlate with a 3^d kernel under replicate padding.

    Output[i] = sum_k kernel[k] * padded[i + k]; the window centre sits at
    kernel index 1 on every axis.
    """
    values = np.asarray(values, dtype=np.float64)
    padded = np.pad(values, 1, mode="edge")
    out = np.zeros(values.shape, dtype=np.float64)
    for offset in np.ndindex(kernel.shape):
        w = kernel[offset]
        if w == 0:
            continue
        window = tuple(slice(o, o + n) for o, n in zip(offset, values.shape))
        out += w * padded[window]
    return out


def sobel2d(label):
    label = np.asarray(label)
    if label.ndim != 2:
        raise ManifoldError(f"sobel2d expects a 2D map, got {label.ndim}D")
    gx = correlate_replicate(label, SOBEL_X_2D)
    gy = correlate_replicate(label, SOBEL_Y_2D)
    return np.sqrt(gx**2 + gy**2)


def sobel3d(label):
    label = np.asarray(label)
    if label.ndim != 3:
        raise ManifoldError(f"sobel3d expects a 3D volume, got {label.ndim}D")
    gx = correlate_replicate(label, SOBEL_X_3D)
    gy = correlate_replicate(label, SOBEL_Y_3D)
    gz = correlate_replicate(label, SOBEL_Z_3D)
    return np.sqrt(gx**2 + gy**2 + gz**2)


def gaussian_kernel(sigma, size=3):
    """Sample the isotropic 2D Gaussian on a ``size x size`` grid, normalised to sum 1."""
    if sigma < 0:
        raise ManifoldError(f"sigma must be non-negative, got {sigma}")
    half = size // 2
    if sigma == 0:
        k = np.zeros((size, size))
        k[half, half] = 1.0
        return k
    r = np.arange(-half, half + 1, dtype=np.float64)
    xx, yy = np.meshgrid(r, r, indexing="ij")
    k = np.exp(-(xx**2 + yy**2) / (2 * sigma**2)) / (2 * np.pi * sigma**2)
    return k / k.sum()


def hysteresis(strong, weak):
    """Keep strong pixels plus weak pixels 8-connected to a strong one."""
    candidates = strong | weak
    components, _ = ndimage.label(candidates, structure=np.ones((3, 3), dtype=bool))
    keep = np.unique(components[strong])
    keep = keep[keep > 0]
    return np.isin(components, keep) & candidates


def canny_gradient(label, sigma=1.0):
    """Max-normalised Sobel magnitude of the Gaussian-smoothed map, in [0, 1]."""
    smoothed = correlate_replicate(label, gaussian_kernel(sigma))
    g = sobel2d(smoothed)
    peak = g.max() if g.size else 0.0
    return g / peak if peak > 0 else g


def canny2d(label, sigma=1.0, t_low=0.1, t_high=0.2):
    label = np.asarray(label)
    if label.ndim != 2:
        raise ManifoldError(f"canny2d expects a 2D map, got {label.ndim}D")
    if not 0.0 <= t_low <= t_high <= 1.0:
        raise ManifoldError(f"need 0 <= t_low <= t_high <= 1, got t_low={t_low}, t_high={t_high}")
    g = canny_gradient(label, sigma)
    strong = g > t_high
    weak = (g > t_low) & ~strong
    return hysteresis(strong, weak).astype(np.uint8)


def binarize_gradient(g):
    return (np.asarray(g) > 0).astype(np.uint8)


def generate_manifold(seg, operator="sobel", **params):
    """Binary manifold map of a label map; same function for labels and pseudo-labels."""
    seg = np.asarray(seg)
    if operator == "sobel":
        if params:
            raise ManifoldError(f"sobel takes no parameters, got {sorted(params)}")
        if seg.ndim == 2:
            return binarize_gradient(sobel2d(seg))
        if seg.ndim == 3:
            return binarize_gradient(sobel3d(seg))
        raise ManifoldError(f"sobel supports 2D or 3D maps, got {seg.ndim}D")
    if operator == "canny":
        if seg.ndim != 2:
            raise ManifoldError("canny operator is only defined for 2D maps")
        return canny2d(seg, **{**CANNY_DEFAULTS, **params})
    raise ManifoldError(f"unknown operator {operator!r}; choose from {OPERATORS}")


def generate_manifold_batch(labels, operator="sobel", **params):
    """Apply ``generate_manifold`` to every map of a ``(B, *spatial)`` array."""
    labels = np.asarray(labels)
    return np.stack([generate_manifold(y, operator, **params) for y in labels])
