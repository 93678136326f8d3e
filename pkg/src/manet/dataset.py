"""Sample storage, synthetic blob datasets and labeled/unlabeled splits.

A sample lives in its own directory::

    sample_<id>/
        meta.json    {"dims": [...], "num_classes": K, "image_dtype": "f32", "label_dtype": "u8"}
        image.raw    little-endian float32, row-major (last axis fastest)
        label.raw    uint8, same order
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_DTYPE = np.dtype("<f4")
LABEL_DTYPE = np.dtype("u1")

_DTYPE_TAGS = {"f32": IMAGE_DTYPE, "u8": LABEL_DTYPE}


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    id: str
    num_classes: int = 2

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        self.label = np.asarray(self.label)
        if self.image.shape != self.label.shape:
            raise DatasetError(
                f"sample {self.id}: image shape {self.image.shape} != label shape {self.label.shape}"
            )
        if self.image.ndim not in (2, 3):
            raise DatasetError(f"sample {self.id}: expected 2D or 3D arrays, got {self.image.ndim}D")
        if self.label.size and (self.label.min() < 0 or self.label.max() >= self.num_classes):
            raise DatasetError(
                f"sample {self.id}: label values must lie in [0, {self.num_classes - 1}]"
            )
        self.label = self.label.astype(np.uint8)

    @property
    def dims(self):
        return self.image.ndim


@dataclass
class DatasetSplit:
    labeled: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)

    @property
    def num_labeled(self):
        return len(self.labeled)

    @property
    def num_unlabeled(self):
        return len(self.unlabeled)


def sample_dirname(sample_id):
    return f"sample_{sample_id}"


def save_sample(sample, directory):
    """Write ``sample`` into ``directory`` (created if missing)."""
    directory = Path(directory)
    if sample.label.size and int(sample.label.max()) >= sample.num_classes:
        raise DatasetError(f"label value {int(sample.label.max())} >= num_classes {sample.num_classes}")
    meta = {
        "dims": list(sample.image.shape),
        "num_classes": int(sample.num_classes),
        "image_dtype": "f32",
        "label_dtype": "u8",
        "id": sample.id,
    }
    try:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "meta.json").write_text(json.dumps(meta))
        (directory / "image.raw").write_bytes(
            np.ascontiguousarray(sample.image, dtype=IMAGE_DTYPE).tobytes()
        )
        (directory / "label.raw").write_bytes(
            np.ascontiguousarray(sample.label, dtype=LABEL_DTYPE).tobytes()
        )
    except OSError as exc:
        raise DatasetError(f"cannot write sample to {directory}: {exc}") from exc


def read_meta(directory):
    path = Path(directory) / "meta.json"
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    meta = json.loads(path.read_text())
    if "dims" not in meta:
        raise DatasetError(f"{path}: no 'dims' entry")
    return meta


def read_raw(path, dtype_tag, dims):
    """Read a raw array file and check its byte count against ``dims``."""
    path = Path(path)
    if dtype_tag not in _DTYPE_TAGS:
        raise DatasetError(f"{path}: unsupported dtype {dtype_tag!r}")
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    dtype = _DTYPE_TAGS[dtype_tag]
    data = path.read_bytes()
    expected = math.prod(dims) * dtype.itemsize
    if len(data) != expected:
        raise DatasetError(
            f"{path}: size mismatch, dims {list(dims)} need {expected} bytes, found {len(data)}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(dims).copy()


def load_sample(directory):
    directory = Path(directory)
    meta = read_meta(directory)
    if meta.get("image_dtype") != "f32" or meta.get("label_dtype") != "u8":
        raise DatasetError(
            f"{directory}: dtype mismatch, expected f32/u8, got "
            f"{meta.get('image_dtype')}/{meta.get('label_dtype')}"
        )
    dims = tuple(int(d) for d in meta["dims"])
    image = read_raw(directory / "image.raw", "f32", dims).astype(np.float32)
    label = read_raw(directory / "label.raw", "u8", dims)
    sample_id = meta.get("id", directory.name.removeprefix("sample_"))
    return Sample(image=image, label=label, id=sample_id, num_classes=int(meta["num_classes"]))


def save_dataset(samples, root):
    root = Path(root)
    for s in samples:
        save_sample(s, root / sample_dirname(s.id))


def load_dataset(root):
    """Load every ``sample_*`` directory under ``root``, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not dirs:
        raise DatasetError(f"no sample_* directories in {root}")
    return [load_sample(d) for d in dirs]


def _blob_mask(shape, center, radii, rotation):
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    offsets = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    local = offsets @ rotation
    return np.sum((local / radii) ** 2, axis=-1) <= 1.0


def _random_rotation(rng, dims):
    # QR of a Gaussian matrix gives a uniformly random orthogonal frame
    q, r = np.linalg.qr(rng.standard_normal((dims, dims)))
    return q * np.sign(np.diag(r))


def synth_dataset(seed, n, dims, side, num_classes, noise_std=0.1):
    """Random ellipse (2D) or ellipsoid (3D) label maps with noisy class-mean images.

    Each sample gets one blob per foreground class. Blobs are painted in
    increasing class order so the higher class wins on overlap. Pixel
    intensity is ``k / (K - 1)`` for class ``k`` plus Gaussian noise.
    """
    if dims not in (2, 3):
        raise DatasetError(f"dims must be 2 or 3, got {dims}")
    if num_classes < 2:
        raise DatasetError(f"num_classes must be >= 2, got {num_classes}")
    if side < 16:
        raise DatasetError(f"side {side} too small to place blobs (need >= 16)")
    if noise_std < 0:
        raise DatasetError("noise_std must be non-negative")

    rng = np.random.default_rng(seed)
    shape = (side,) * dims
    r_min, r_max = side / 8.0, side / 4.0
    samples = []
    width = len(str(max(n - 1, 0)))
    for i in range(n):
        label = np.zeros(shape, dtype=np.uint8)
        for k in range(1, num_classes):
            radii = rng.uniform(r_min, r_max, size=dims)
            margin = radii.max() + 1
            center = rng.uniform(margin, side - 1 - margin, size=dims)
            rotation = _random_rotation(rng, dims)
            label[_blob_mask(shape, center, radii, rotation)] = k
        image = label.astype(np.float64) / (num_classes - 1)
        if noise_std > 0:
            image = image + rng.normal(0.0, noise_std, size=shape)
        samples.append(
            Sample(image=image.astype(np.float32), label=label, id=f"{i:0{width}d}", num_classes=num_classes)
        )
    return samples


def split_dataset(samples, labeled_ratio, seed):
    """Shuffle by ``seed`` and take the first ``ceil(ratio * n)`` as labeled."""
    if not samples:
        raise DatasetError("cannot split an empty dataset")
    if not 0.0 < labeled_ratio <= 1.0:
        raise DatasetError(f"labeled_ratio must be in (0, 1], got {labeled_ratio}")
    n = len(samples)
    # guard against float noise such as 0.1 * 100 = 10.000000000000002
    num_labeled = math.ceil(round(labeled_ratio * n, 9))
    if num_labeled < 1:
        raise DatasetError("labeled_ratio * n must be at least 1")
    order = np.random.default_rng(seed).permutation(n)
    labeled = [samples[i] for i in order[:num_labeled]]
    unlabeled = [samples[i] for i in order[num_labeled:]]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled)


def one_hot(label, num_classes):
    """Channel-first one-hot encoding: ``(*spatial) -> (K, *spatial)``."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() >= num_classes):
        raise DatasetError(f"label values must lie in [0, {num_classes - 1}]")
    return (np.arange(num_classes).reshape((-1,) + (1,) * label.ndim) == label[None]).astype(np.float32)
