"""Guided backpropagation, Grad-CAM and their product for a trained model.

All attributions target the pre-sigmoid logit of one head. For the ordinal
GCS head (two cumulative bits) the target is the sum of its logits, so the
map explains movement toward more severe classes. Passes run in eval mode
on a private tape with ``accumulate=False``; parameters, their ``.grad``
and batch-norm running statistics are never written.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .model import MultiTaskModel
from .nn import Tape, Tensor, tensor_sum

METHODS = ("gbp", "gradcam", "ggcam")


@dataclass
class SaliencyVolume:
    values: np.ndarray  # (D, H, W)
    head: str
    method: str
    threshold: Optional[float] = None
    degenerate: bool = False


@dataclass
class CamMap:
    low: np.ndarray  # feature-layer resolution
    values: np.ndarray  # upsampled to the input extents
    layer: str
    head: str


def model_checksum(model) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _as_batch(volume) -> np.ndarray:
    v = np.asarray(volume, dtype=np.float64)
    if v.ndim == 3:
        v = v[None, None]
    elif v.ndim == 4:
        v = v[None]
    if v.ndim != 5 or v.shape[:2] != (1, 1):
        raise ValueError(f"expected a single (D, H, W) volume, got shape {np.shape(volume)}")
    return v


def _target(model: MultiTaskModel, out, head: str) -> Tensor:
    if head not in model.config.heads:
        raise ValueError(f"head {head!r} is not part of variant {model.config.variant} (heads: {model.config.heads})")
    return tensor_sum(out.head(head))


def _guided_relu(node, g):
    # pass only positive gradient through units that were open going forward
    return (g * ((node.inputs[0].data > 0) & (g > 0)),)


def input_gradient(model: MultiTaskModel, volume, head: str, guided: bool = False) -> np.ndarray:
    x = Tensor(_as_batch(volume), requires_grad=True)
    with Tape() as tape:
        out = model.forward(x, training=False)
        target = _target(model, out, head)
    tape.backward(target, overrides={"relu": _guided_relu} if guided else None, accumulate=False)
    g = tape.grad(x)
    return np.zeros(x.shape[2:]) if g is None else g[0, 0].copy()


def guided_backprop(model: MultiTaskModel, volume, head: str = "prognosis") -> SaliencyVolume:
    return SaliencyVolume(input_gradient(model, volume, head, guided=True), head, "gbp")


def upsample(low: np.ndarray, shape, nearest: bool = False) -> np.ndarray:
    """Resize a 3D map to ``shape`` (trilinear, or nearest neighbour)."""
    factors = [t / s for t, s in zip(shape, low.shape)]
    up = ndimage.zoom(low, factors, order=0 if nearest else 1, mode="nearest", grid_mode=nearest)
    if up.shape != tuple(shape):  # zoom rounds output extents; never expected here
        raise ValueError(f"upsampled shape {up.shape} differs from {tuple(shape)}")
    return up


def cam_from(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """ReLU of the channel sum weighted by spatially averaged gradients;
    inputs are (C, D, H, W)."""
    weights = gradient.mean(axis=(1, 2, 3))
    return np.maximum(np.tensordot(weights, activation, axes=1), 0.0)


def grad_cam(model: MultiTaskModel, volume, head: str = "prognosis", layer: Optional[str] = None, nearest: bool = False) -> CamMap:
    layers = model.backbone.feature_layers
    if layer is None:
        layer = f"block{len(model.backbone.blocks)}"
    if layer not in layers:
        raise ValueError(f"unknown feature layer {layer!r}; choose from {layers}")
    x = Tensor(_as_batch(volume), requires_grad=True)
    with Tape() as tape:
        out, feats = model.forward_features(x, training=False)
        target = _target(model, out, head)
    tape.backward(target, accumulate=False)
    act = feats[layer]
    g = tape.grad(act)
    if g is None:
        g = np.zeros(act.shape)
    low = cam_from(act.data[0], g[0])
    return CamMap(low, np.maximum(upsample(low, x.shape[2:], nearest), 0.0), layer, head)


def guided_grad_cam(gbp: SaliencyVolume, cam: CamMap) -> SaliencyVolume:
    if gbp.values.shape != cam.values.shape:
        raise ValueError(f"shape mismatch: guided {gbp.values.shape} vs cam {cam.values.shape}")
    return SaliencyVolume(gbp.values * cam.values, gbp.head, "ggcam")


def _normalize_block(a: np.ndarray, quantile: float):
    a = np.abs(a)
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.zeros_like(a), None, True
    norm = (a - lo) / (hi - lo)
    nz = norm[norm > 0]
    thr = float(np.quantile(nz, quantile))
    norm[norm < thr] = 0.0
    return norm, thr, False


def normalize_threshold(sal: SaliencyVolume, quantile: float = 0.9, per_slice: bool = False) -> SaliencyVolume:
    """Min-max normalize |values| to [0, 1], then zero everything below the
    given quantile of the nonzero normalized values.

    A constant volume (or slice, with ``per_slice``) becomes all zeros and is
    flagged degenerate. ``threshold`` holds the cut (the smallest cut when
    slices are normalized separately).
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    v = np.asarray(sal.values, dtype=np.float64)
    if per_slice:
        out = np.empty_like(v)
        cuts, degenerate = [], False
        for k in range(v.shape[0]):
            out[k], thr, deg = _normalize_block(v[k], quantile)
            degenerate |= deg
            if thr is not None:
                cuts.append(thr)
        thr = min(cuts) if cuts else None
    else:
        out, thr, degenerate = _normalize_block(v, quantile)
    return SaliencyVolume(out, sal.head, sal.method, thr, degenerate)


def compute(model: MultiTaskModel, volume, method: str, head: str = "prognosis", layer: Optional[str] = None, nearest: bool = False) -> SaliencyVolume:
    if method not in METHODS:
        raise ValueError(f"unknown saliency method {method!r}; choose from {METHODS}")
    if method == "gbp":
        return guided_backprop(model, volume, head)
    cam = grad_cam(model, volume, head, layer, nearest)
    if method == "gradcam":
        return SaliencyVolume(cam.values, head, "gradcam")
    return guided_grad_cam(guided_backprop(model, volume, head), cam)


# export


def write_raw(values: np.ndarray, path, **meta) -> Path:
    """Little-endian float64 dump plus ``<path>.json`` with shape and ``meta``."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(values, dtype="<f8").tobytes())
    side = {"shape": list(values.shape), "dtype": "float64", "endian": "little", "order": "C", **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path


def write_pgm(slice2d: np.ndarray, path) -> Path:
    """8-bit binary PGM of a slice with values in [0, 1]."""
    path = Path(path)
    img = np.rint(np.clip(slice2d, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the pixels
    return np.frombuffer(data[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def export_slices(sal: SaliencyVolume, directory, subject_id: str, slices: Optional[Sequence[int]] = None) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    depth = sal.values.shape[0]
    slices = range(depth) if slices is None else slices
    paths = []
    for k in slices:
        if not 0 <= k < depth:
            raise ValueError(f"slice {k} outside [0, {depth})")
        paths.append(write_pgm(sal.values[k], directory / f"{subject_id}_{sal.method}_{sal.head}_z{k}.pgm"))
    return paths
