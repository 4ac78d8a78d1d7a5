"""Small image helpers shared by augmentation, segmentation and rendering."""

import numpy as np

from . import _kernels


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear samples of ``image[y, x]``; pixels outside the image read as 0.

    Integer coordinates return the stored value exactly.
    """
    img = np.ascontiguousarray(image, dtype=np.float64)
    xs, ys = np.broadcast_arrays(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    flat = _kernels.bilinear(img, np.ascontiguousarray(xs).ravel(), np.ascontiguousarray(ys).ravel())
    return flat.reshape(xs.shape)


def box_sum(image: np.ndarray, radius: int):
    """Window sums and pixel counts over (2r+1)^2 windows clipped to the image."""
    return _kernels.box_sum(np.ascontiguousarray(image, dtype=np.float64), int(radius))


def rotation_matrix(degrees: float) -> np.ndarray:
    """Rotation acting on (x, y) pixel offsets; positive turns +x toward -y
    (counter-clockwise as displayed with rows going down)."""
    a = np.deg2rad(degrees)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, s], [-s, c]])
