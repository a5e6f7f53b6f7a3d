"""Dataset ingestion (IDX, CIFAR-10 binary, image folders) and image output."""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR10_RECORD = 3073
CIFAR10_CLASSES = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
]

LUMA = (0.299, 0.587, 0.114)


@dataclass
class Dataset:
    images: list  # arrays in [0,1], [H,W] or [C,H,W]
    labels: list
    class_names: list
    native_size: tuple

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        for lb in self.labels:
            if not 0 <= lb < len(self.class_names):
                raise ValueError("label %d out of range" % lb)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    """Parse the big-endian IDX pair (images magic 2051, labels magic 2049)."""
    with open(images_path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise ValueError("truncated IDX image file (missing header)")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise ValueError("bad IDX image magic 0x%08x (expected 0x%08x)" % (magic, IDX_IMAGE_MAGIC))
    need = 16 + count * rows * cols
    if len(blob) < need:
        raise ValueError("truncated IDX image payload (%d bytes, need %d)" % (len(blob), need))
    pixels = np.frombuffer(blob[16:need], dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        lblob = f.read()
    if len(lblob) < 8:
        raise ValueError("truncated IDX label file (missing header)")
    lmagic, lcount = struct.unpack(">II", lblob[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise ValueError("bad IDX label magic 0x%08x (expected 0x%08x)" % (lmagic, IDX_LABEL_MAGIC))
    if len(lblob) < 8 + lcount:
        raise ValueError("truncated IDX label payload")
    if lcount != count:
        raise ValueError("IDX image/label count mismatch: %d vs %d" % (count, lcount))
    labels = np.frombuffer(lblob[8 : 8 + lcount], dtype=np.uint8)

    names = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
    return Dataset(
        images=[p.astype(np.float64) / 255.0 for p in pixels],
        labels=[int(l) for l in labels],
        class_names=names,
        native_size=(rows, cols),
    )


def write_mnist_idx(images, labels, images_path, labels_path) -> None:
    """Write images/labels back out in IDX form (bytes, rounded from [0,1])."""
    arr = np.stack([np.asarray(im) for im in images])
    count, rows, cols = arr.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, count, rows, cols))
        f.write(np.round(arr * 255.0).astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, count))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def load_cifar10_bin(path) -> Dataset:
    """CIFAR-10 binary batches: 1 label byte + 3072 plane-ordered pixel bytes."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) == 0 or len(blob) % CIFAR10_RECORD != 0:
        raise ValueError(
            "bad CIFAR-10 file length %d (must be a positive multiple of %d)"
            % (len(blob), CIFAR10_RECORD)
        )
    n = len(blob) // CIFAR10_RECORD
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(n, CIFAR10_RECORD)
    labels = raw[:, 0]
    if labels.max() > 9:
        raise ValueError("CIFAR-10 label byte %d out of range" % labels.max())
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(
        images=list(images),
        labels=[int(l) for l in labels],
        class_names=list(CIFAR10_CLASSES),
        native_size=(32, 32),
    )


def load_image_dir(root) -> Dataset:
    """Directory-per-class tree of PNG/PGM/JPEG images."""
    from PIL import Image

    class_names = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not class_names:
        raise ValueError("no class directories under %r" % root)
    images, labels = [], []
    native = None
    for ci, name in enumerate(class_names):
        cdir = os.path.join(root, name)
        files = sorted(os.listdir(cdir))
        loaded = 0
        for fn in files:
            path = os.path.join(cdir, fn)
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im, dtype=np.float64) / 255.0
            except Exception as e:
                warnings.warn("skipping unreadable image %s: %s" % (path, e), stacklevel=2)
                continue
            if arr.ndim == 3:
                arr = arr[:, :, :3].transpose(2, 0, 1)
            images.append(arr)
            labels.append(ci)
            native = arr.shape[-2:]
            loaded += 1
        if loaded == 0:
            raise ValueError("class directory %r holds no readable images" % cdir)
    return Dataset(images=images, labels=labels, class_names=class_names, native_size=native)


def to_grayscale(img: Array) -> Array:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[0] == 3:
        return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]
    if img.ndim == 3 and img.shape[0] == 1:
        return img[0]
    raise ValueError("cannot convert shape %s to grayscale" % (img.shape,))


def resize_bilinear(img: Array, out_h: int, out_w: int) -> Array:
    """Corner-aligned bilinear resize ([H,W] or [C,H,W])."""
    img = np.asarray(img, dtype=np.float64)
    single = img.ndim == 2
    x = img[None] if single else img
    c, h, w = x.shape
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    return out[0] if single else out


def write_pgm(img: Array, path) -> None:
    """Binary PGM (P5, maxval 255) of a [H,W] image in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D image, got shape %s" % (img.shape,))
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(data.tobytes())


def read_pgm(path) -> Array:
    with open(path, "rb") as f:
        if f.read(2) != b"P5":
            raise ValueError("not a binary PGM (P5) file")
        fields = []
        while len(fields) < 3:
            line = f.readline()
            if not line:
                raise ValueError("truncated PGM header")
            s = line.split(b"#")[0]
            fields.extend(int(t) for t in s.split())
        w, h, maxval = fields[:3]
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise ValueError("truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / float(maxval)


def write_png(img: Array, path) -> None:
    """PNG output; grayscale for [H,W], RGB for [3,H,W]."""
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.ndim == 2:
        Image.fromarray(data, mode="L").save(path)
    elif img.ndim == 3 and img.shape[0] == 3:
        Image.fromarray(data.transpose(1, 2, 0), mode="RGB").save(path)
    else:
        raise ValueError("write_png expects [H,W] or [3,H,W], got %s" % (img.shape,))


def read_image(path) -> Array:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        return arr[:, :, :3].transpose(2, 0, 1)
    return arr
