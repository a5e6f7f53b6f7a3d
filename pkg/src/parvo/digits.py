"""Procedural handwritten-style digit images.

Deterministic substitute for digit datasets when no files are on disk:
white strokes on black, values in [0,1], jittered per sample. Shapes are
polyline skeletons rendered with an anti-aliased distance profile.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset

DIGIT_NAMES = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]


def _arc(cx, cy, rx, ry, t0, t1, n=28):
    t = np.linspace(t0, t1, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _line(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y1]])


def _strokes(digit: int):
    # unit square, x right, y down
    pi = np.pi
    if digit == 0:
        return [_arc(0.5, 0.5, 0.25, 0.36, 0, 2 * pi)]
    if digit == 1:
        return [_line(0.36, 0.28, 0.54, 0.12), _line(0.54, 0.12, 0.54, 0.88)]
    if digit == 2:
        return [
            _arc(0.5, 0.32, 0.24, 0.20, -pi, 0.15 * pi),
            _line(0.70, 0.42, 0.28, 0.84),
            _line(0.28, 0.84, 0.76, 0.84),
        ]
    if digit == 3:
        return [
            _arc(0.44, 0.31, 0.24, 0.19, -0.7 * pi, 0.5 * pi),
            _arc(0.44, 0.68, 0.26, 0.21, -0.5 * pi, 0.7 * pi),
        ]
    if digit == 4:
        return [
            _line(0.60, 0.12, 0.24, 0.60),
            _line(0.24, 0.60, 0.80, 0.60),
            _line(0.62, 0.34, 0.62, 0.88),
        ]
    if digit == 5:
        return [
            _line(0.72, 0.14, 0.33, 0.14),
            _line(0.33, 0.14, 0.30, 0.46),
            _arc(0.47, 0.65, 0.24, 0.22, -0.70 * pi, 0.60 * pi),
        ]
    if digit == 6:
        return [
            np.array([[0.66, 0.12], [0.50, 0.28], [0.39, 0.50], [0.36, 0.66]]),
            _arc(0.53, 0.66, 0.18, 0.19, 0, 2 * pi),
        ]
    if digit == 7:
        return [_line(0.26, 0.15, 0.74, 0.15), _line(0.74, 0.15, 0.42, 0.88)]
    if digit == 8:
        return [
            _arc(0.5, 0.31, 0.19, 0.17, 0, 2 * pi),
            _arc(0.5, 0.68, 0.23, 0.20, 0, 2 * pi),
        ]
    if digit == 9:
        return [
            _arc(0.49, 0.33, 0.19, 0.19, 0, 2 * pi),
            np.array([[0.68, 0.36], [0.66, 0.60], [0.54, 0.88]]),
        ]
    raise ValueError("digit must be 0-9")


def _render(points_list, size, thickness):
    ys, xs = np.mgrid[0:size, 0:size]
    px = (xs + 0.5) / size
    py = (ys + 0.5) / size
    img = np.zeros((size, size))
    aa = 1.2 / size
    for pts in points_list:
        for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
            dx, dy = x1 - x0, y1 - y0
            den = dx * dx + dy * dy
            if den < 1e-12:
                t = np.zeros_like(px)
            else:
                t = np.clip(((px - x0) * dx + (py - y0) * dy) / den, 0.0, 1.0)
            dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
            img = np.maximum(img, np.clip((thickness - dist) / aa + 0.5, 0.0, 1.0))
    return img


def render_digit(digit: int, size: int = 28, seed: int = 0) -> np.ndarray:
    """One [size,size] grayscale digit with seeded jitter."""
    rng = np.random.default_rng(seed)
    shift = rng.uniform(-0.05, 0.05, size=2)
    scale = rng.uniform(0.85, 1.08)
    angle = rng.uniform(-0.12, 0.12)
    thickness = rng.uniform(0.045, 0.075)
    ca, sa = np.cos(angle), np.sin(angle)
    rot = np.array([[ca, -sa], [sa, ca]])
    strokes = []
    for pts in _strokes(digit):
        p = (pts - 0.5) * scale @ rot.T + 0.5 + shift
        strokes.append(p)
    return _render(strokes, size, thickness)


def make_digit_dataset(count: int, size: int = 28, seed: int = 0) -> Dataset:
    """`count` digit images cycling through classes 0..9, deterministically."""
    if count <= 0:
        raise ValueError("count must be positive")
    images, labels = [], []
    for k in range(count):
        digit = k % 10
        images.append(render_digit(digit, size=size, seed=seed * 100003 + k))
        labels.append(digit)
    return Dataset(images=images, labels=labels, class_names=list(DIGIT_NAMES), native_size=(size, size))
