import numpy as np
import pytest

from trifield.dataio import make_dataset


def numerical_grad(loss, arr: np.ndarray, h: float = 1e-4, index=None) -> np.ndarray:
    """Central differences of ``loss()`` w.r.t. entries of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if index is None else index
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = loss()
        flat[i] = old - h
        down = loss()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def small_sphere_dataset(tmp_path_factory):
    """16 views of the sphere scene at 32x32, shared across the session."""
    out = tmp_path_factory.mktemp("sphere32")
    make_dataset("sphere", 16, 32, 0, out, samples=256)
    return out / "manifest.json"
