"""Grad-CAM importance maps and heatmap export (PGM + CSV)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .models import add_network, declare_params


@dataclass
class CamResult:
    map: np.ndarray
    upsampled: np.ndarray
    target_class: int
    layer_id: str


def channel_weights(activations, grads):
    """Spatial mean of the class-score gradient per feature map."""
    activations = np.asarray(activations)
    grads = np.asarray(grads, dtype=np.float64)
    if activations.shape != grads.shape or grads.ndim != 3:
        raise ValueError(f"activations and grads must both be [K, H, W], got {activations.shape} and {grads.shape}")
    return grads.mean(axis=(1, 2))


def cam(activations, weights):
    activations = np.asarray(activations, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if activations.ndim != 3 or weights.shape != (activations.shape[0],):
        raise ValueError(f"need [K, H, W] activations and [K] weights, got {activations.shape}, {weights.shape}")
    return np.maximum(np.tensordot(weights, activations, axes=1), 0.0)


def upsample_bilinear(m, size):
    """Bilinear resize with corner alignment (corner values are preserved)."""
    m = np.asarray(m, dtype=np.float64)
    (h, w), (H, W) = m.shape, size
    if H < h or W < w:
        raise ValueError(f"target size {size} is smaller than map {m.shape}")

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out), np.zeros(n_out, dtype=int), np.zeros(n_out)
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        return pos, lo, pos - lo

    _, r0, fr = coords(h, H)
    _, c0, fc = coords(w, W)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = m[r0][:, c0] * (1 - fc) + m[r0][:, c1] * fc
    bottom = m[r1][:, c0] * (1 - fc) + m[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bottom * fr[:, None]


def normalize(m):
    """Min-max scale to [0, 1]; a constant map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    if hi == lo:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def grad_cam(params, image, target_class=None, layer=-1):
    """Grad-CAM for one ``[C, H, W]`` image at a convolutional block.

    The score differentiated is the pre-softmax logit of ``target_class``
    (default: the predicted class). ``layer`` indexes the conv blocks; the
    block output is taken after its ReLU when one follows the convolution.
    """
    x = np.asarray(image, dtype=np.float64)[None]
    g = Graph()
    xn = g.input("x", x.shape)
    nodes = add_network(g, xn, params.arch, declare_params(g, params))
    if not nodes.conv_outputs:
        raise ValueError(f"architecture {params.arch_id!r} has no convolutional layer")
    target = nodes.conv_outputs[layer]
    logits = g.forward({"x": x}, params.entries, output=nodes.logits)
    if target_class is None:
        target_class = int(np.argmax(logits[0]))
    seed = np.zeros_like(logits)
    seed[0, target_class] = 1.0
    g.backward(seed, output=nodes.logits)
    acts = g.value(target)[0]
    weights = channel_weights(acts, g.grad(target)[0])
    raw = cam(acts, weights)
    up = normalize(upsample_bilinear(raw, x.shape[2:]))
    return CamResult(raw, up, int(target_class), target.name)


def write_pgm(path, image):
    """8-bit binary PGM (P5, maxval 255) from values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def write_map_csv(path, values):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(values, dtype=np.float64):
            w.writerow([repr(float(v)) for v in row])


def read_map_csv(path):
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def render(result, out_dir, image_id, method):
    """Write ``{image_id}_{method}_{class}.pgm`` and a companion CSV; returns the PGM path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{image_id}_{method}_{result.target_class}"
    pgm = out_dir / f"{stem}.pgm"
    try:
        write_pgm(pgm, result.upsampled)
        write_map_csv(out_dir / f"{stem}.csv", result.upsampled)
    except OSError as exc:
        raise OSError(f"cannot write heatmap {pgm}: {exc}") from exc
    return pgm
