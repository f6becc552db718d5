"""Closed-form stain math for brightfield HED images.

Channel order is fixed everywhere as (H, E, D): hematoxylin counterstain,
the purple eosin-like nuclear chromogen, and DAB. In the fluorescence
domain the same three slots hold (DAPI, Ki67, HER2).

Arrays are channel-last (``H x W x 3``) unless a function says otherwise.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

CHANNELS = ("H", "E", "D")
H, E, D = 0, 1, 2

DEFAULT_EPSILON = 1e-6
MAX_CONDITION = 1e6

# Rows are OD colour vectors (R, G, B) of hematoxylin, eosin and DAB, as in
# the Ruifrok & Johnston table; normalized to unit length at import.
_RAW_HED = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)
DEFAULT_STAIN_MATRIX = _RAW_HED / np.linalg.norm(_RAW_HED, axis=1, keepdims=True)
DEFAULT_STAIN_MATRIX.setflags(write=False)

# alpha[out, in]; rows/cols ordered (H, E, D).
DEFAULT_ALPHA = np.array(
    [
        [1.0, 0.5, 0.0],
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
    ]
)
DEFAULT_ALPHA.setflags(write=False)


class StainMatrixError(ValueError):
    pass


def validate_patch(patch: np.ndarray) -> np.ndarray:
    """Check an RGB patch: ``H x W x 3``, finite, values within [0, 1]."""
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[-1] != 3:
        raise ValueError(f"expected an H x W x 3 patch, got shape {patch.shape}")
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains NaN or Inf")
    if patch.min(initial=0.0) < 0.0 or patch.max(initial=0.0) > 1.0:
        raise ValueError("patch values must lie in [0, 1]")
    return patch


def validate_stain(stain: np.ndarray) -> np.ndarray:
    stain = np.asarray(stain, dtype=np.float64)
    if stain.shape[-1] != 3:
        raise ValueError(f"stain image needs 3 trailing channels, got {stain.shape}")
    if not np.all(np.isfinite(stain)):
        raise ValueError("stain image contains NaN or Inf")
    if stain.min(initial=0.0) < 0.0:
        raise ValueError("stain concentrations must be non-negative")
    return stain


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def validate_stain_matrix(m: np.ndarray) -> np.ndarray:
    """Return ``m`` as float64 after checking unit rows and invertibility."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise StainMatrixError(f"stain matrix must be 3x3, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise StainMatrixError("stain matrix has non-finite entries")
    norms = np.linalg.norm(m, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise StainMatrixError(f"stain matrix rows must be unit norm, got norms {norms}")
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond >= MAX_CONDITION:
        raise StainMatrixError(f"stain matrix is singular or ill-conditioned (cond={cond:.3g})")
    return m


def load_stain_matrix(source: Union[str, Path, dict, list], normalize: bool = True) -> np.ndarray:
    """Load a 3x3 stain matrix.

    ``source`` may be a nested list, a mapping with keys ``H``, ``E``, ``D``
    (or a ``stain_matrix`` key holding either form), or a path to a
    whitespace-separated text file, a JSON file, or a YAML file.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        text = path.read_text()
        if path.suffix.lower() == ".json":
            source = json.loads(text)
        elif path.suffix.lower() in (".yaml", ".yml"):
            import yaml

            source = yaml.safe_load(text)
        else:
            source = np.loadtxt(path, ndmin=2)
    if isinstance(source, dict):
        if "stain_matrix" in source:
            return load_stain_matrix(source["stain_matrix"], normalize=normalize)
        try:
            source = [source[c] for c in CHANNELS]
        except KeyError as exc:
            raise StainMatrixError(f"stain matrix mapping is missing row {exc}") from None
    m = np.asarray(source, dtype=np.float64)
    if m.shape != (3, 3):
        raise StainMatrixError(f"stain matrix must be 3x3, got {m.shape}")
    if normalize:
        m = normalize_rows(m)
    return validate_stain_matrix(m)


def rgb_to_od(patch: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Beer-Lambert optical density, ``-log10((I + eps) / (1 + eps))``."""
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    patch = validate_patch(patch)
    return -np.log10((patch + epsilon) / (1.0 + epsilon))


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(np.power(10.0, -np.asarray(od, dtype=np.float64)), 0.0, 1.0)


def od_to_concentrations(od: np.ndarray, m: np.ndarray = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    """Colour deconvolution: solve ``od = c @ m`` per pixel, clamp ``c >= 0``."""
    m = validate_stain_matrix(m)
    od = np.asarray(od, dtype=np.float64)
    if od.shape[-1] != 3 or not np.all(np.isfinite(od)):
        raise ValueError("od must be finite with 3 trailing channels")
    c = od @ np.linalg.inv(m)
    return np.maximum(c, 0.0)


def concentrations_to_od(stain: np.ndarray, m: np.ndarray = DEFAULT_STAIN_MATRIX) -> np.ndarray:
    m = validate_stain_matrix(m)
    stain = validate_stain(stain)
    return np.maximum(stain @ m, 0.0)


def validate_alpha(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (3, 3):
        raise ValueError(f"restain coefficients must be 3x3, got {alpha.shape}")
    if not np.all(np.isfinite(alpha)):
        raise ValueError("restain coefficients must be finite")
    return alpha


def restain(stain: np.ndarray, alpha: np.ndarray = DEFAULT_ALPHA) -> np.ndarray:
    """Remap stain channels linearly: ``out[..., o] = sum_i alpha[o, i] * x[..., i]``.

    Negative results are clamped to zero. With the default coefficients the
    eosin-like signal is folded into hematoxylin at half weight and removed
    from its own channel, DAB is kept as is.
    """
    stain = validate_stain(stain)
    alpha = validate_alpha(alpha)
    return np.maximum(stain @ alpha.T, 0.0)


def alpha_from_mapping(values: dict) -> np.ndarray:
    """Build coefficients from keys like ``hh``, ``eh``, ``dd`` (``<in><out>``).

    Missing entries are zero. ``eh`` means input E feeding output H.
    """
    alpha = np.zeros((3, 3))
    index = {c.lower(): i for i, c in enumerate(CHANNELS)}
    for key, value in values.items():
        key = key.lower().removeprefix("alpha_")
        if len(key) != 2 or key[0] not in index or key[1] not in index:
            raise ValueError(f"bad restain coefficient key {key!r}")
        alpha[index[key[1]], index[key[0]]] = float(value)
    return validate_alpha(alpha)
