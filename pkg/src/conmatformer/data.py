"""Dataset ingestion, stratified splitting, augmentation and class balancing.

Images are channel-first float32 arrays in [0, 1]. The whole pipeline is a
pure function of (directory, seed, augmentation spec): per-sample RNG streams
are spawned from the caller's generator so results do not depend on execution
order or parallelism.
"""

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".ppm"}

# Post-augmentation per-class sample targets for the four-class setup
# (lexicographic label order: both, infection, ischaemia, none).
TABLE1_TRAIN_TARGETS = {0: 3034, 1: 3035, 2: 2777, 3: 3036}
TABLE1_VAL_TARGETS = {0: 1011, 1: 1011, 2: 925, 3: 1012}


class DataError(Exception):
    """Raised for unusable dataset layouts or sizes."""


@dataclasses.dataclass
class Sample:
    image: np.ndarray            # [3, H, W] float32 in [0, 1]
    label: int
    source_path: str
    augmented_from: str | None = None
    split: str | None = None     # train | val | test
    fold: int | None = None


@dataclasses.dataclass
class AugmentSpec:
    """Menu-driven augmentation parameters; every random draw comes from one
    of these finite menus or uniform ranges."""

    resize: int = 224
    hflip_probs: tuple = (0.2, 0.5)
    vflip_probs: tuple = (0.2, 0.5)
    rotation_degrees: tuple = (15, 30, 45, 60)
    affine_rotation: float = 10.0
    affine_translate: tuple = (0.1, 0.1)
    affine_scale: tuple = (0.9, 1.1)


@dataclasses.dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def all_samples(self):
        return self.train + self.val + self.test


def list_classes(root_dir):
    """Class subdirectories sorted lexicographically; the sort fixes labels."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"data root {root} does not exist")
    names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not names:
        raise DataError(f"data root {root} contains no class directories")
    return names


def _decode(path):
    with Image.open(path) as img:
        rgb = img.convert("RGB")   # grayscale is replicated to 3 channels
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_dataset(root_dir):
    """Decode every class-labelled image under root_dir into Samples.

    Undecodable files are skipped with a warning; an empty class directory is
    an error.
    """
    root = Path(root_dir)
    samples = []
    skipped = 0
    for label, name in enumerate(list_classes(root)):
        class_dir = root / name
        files = sorted(p for p in class_dir.iterdir()
                       if p.suffix.lower() in IMAGE_EXTENSIONS)
        loaded = 0
        for path in files:
            try:
                image = _decode(path)
            except Exception as exc:
                skipped += 1
                log.warning("skipping undecodable image %s: %s", path, exc)
                continue
            samples.append(Sample(image=image, label=label, source_path=str(path)))
            loaded += 1
        if loaded == 0:
            raise DataError(f"class directory {class_dir} has no decodable images")
    if skipped:
        log.warning("skipped %d undecodable files under %s", skipped, root)
    return samples


# -- geometric transforms ---------------------------------------------------------


def _warp(image, matrix, offset, out_shape):
    """Inverse-map bilinear warp per channel, zero fill outside."""
    out = np.empty((image.shape[0],) + out_shape, dtype=np.float32)
    for c in range(image.shape[0]):
        out[c] = ndimage.affine_transform(
            image[c], matrix, offset=offset, output_shape=out_shape,
            order=1, mode="constant", cval=0.0)
    return out


def resize_image(image, size):
    """Bilinear resize to size x size (half-pixel centre convention)."""
    h, w = image.shape[1], image.shape[2]
    if h == 0 or w == 0:
        raise DataError("cannot resize a degenerate (empty) image")
    if h == size and w == size:
        return image.astype(np.float32, copy=False)
    sy, sx = h / size, w / size
    matrix = np.array([[sy, 0.0], [0.0, sx]])
    offset = np.array([0.5 * sy - 0.5, 0.5 * sx - 0.5])
    return _warp(image, matrix, offset, (size, size))


def rotate_image(image, degrees):
    """Rotate counterclockwise (as printed) about the image centre.

    Multiples of 90 degrees on square images land exactly on the pixel grid,
    which the hand-computed rotation oracle relies on.
    """
    h, w = image.shape[1], image.shape[2]
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    matrix = np.array([[cos, sin], [-sin, cos]])
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = centre - matrix @ centre
    return _warp(image, matrix, offset, (h, w))


def affine_image(image, degrees, translate, scale):
    """Rotation+scale about the centre followed by translation (fractions of
    the image size), bilinear, zero fill."""
    h, w = image.shape[1], image.shape[2]
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    matrix = np.array([[cos, sin], [-sin, cos]]) / scale
    centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    shift = np.array([translate[0] * h, translate[1] * w])
    offset = centre - matrix @ (centre + shift)
    return _warp(image, matrix, offset, (h, w))


def augment_image(image, spec, rng):
    """Resize then the randomized flip/rotation/affine chain.

    Draw order is fixed (flip probabilities, flips, rotation angle, affine
    parameters) so a generator seed fully determines the output.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"augment_image expects [3,H,W], got {image.shape}")
    out = resize_image(image, spec.resize)

    p_h = spec.hflip_probs[rng.integers(len(spec.hflip_probs))]
    if rng.random() < p_h:
        out = out[:, :, ::-1]
    p_v = spec.vflip_probs[rng.integers(len(spec.vflip_probs))]
    if rng.random() < p_v:
        out = out[:, ::-1, :]
    angle = spec.rotation_degrees[rng.integers(len(spec.rotation_degrees))]
    if angle:
        out = rotate_image(np.ascontiguousarray(out), angle)
    a_rot = rng.uniform(-spec.affine_rotation, spec.affine_rotation)
    a_ty = rng.uniform(-spec.affine_translate[0], spec.affine_translate[0])
    a_tx = rng.uniform(-spec.affine_translate[1], spec.affine_translate[1])
    a_sc = rng.uniform(spec.affine_scale[0], spec.affine_scale[1])
    out = affine_image(np.ascontiguousarray(out), a_rot, (a_ty, a_tx), a_sc)
    return np.clip(out, 0.0, 1.0)


# -- splitting / balancing ----------------------------------------------------------


def stratified_split(samples, ratios=(0.6, 0.2, 0.2), seed=0):
    """Assign train/val/test per class, within 1 sample of the exact ratios.

    Largest-remainder rounding per class; the permutation is drawn from
    default_rng(seed), so the same seed reproduces the same assignment.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(i)
    names = ("train", "val", "test")
    buckets = {n: [] for n in names}
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) < 5:
            raise DataError(f"class {label} has only {len(idx)} samples, need >= 5")
        order = rng.permutation(len(idx))
        exact = [len(idx) * r for r in ratios]
        counts = [int(np.floor(e)) for e in exact]
        leftover = len(idx) - sum(counts)
        remainders = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
        for k in remainders[:leftover]:
            counts[k] += 1
        start = 0
        for name, count in zip(names, counts):
            for j in order[start:start + count]:
                samples[idx[j]].split = name
                buckets[name].append(idx[j])
            start += count
    return DatasetSplit(train=[samples[i] for i in sorted(buckets["train"])],
                        val=[samples[i] for i in sorted(buckets["val"])],
                        test=[samples[i] for i in sorted(buckets["test"])])


def balance_classes(split_samples, per_class_target, rng, spec=None):
    """Grow each class to exactly its target by appending augmented copies.

    Originals are always retained; sources are used round-robin so the reuse
    counts differ by at most one. Targets below the current count are errors.
    """
    spec = spec or AugmentSpec()
    by_class = {}
    for s in split_samples:
        by_class.setdefault(s.label, []).append(s)
    out = list(split_samples)
    for label in sorted(by_class):
        originals = by_class[label]
        target = per_class_target[label] if isinstance(per_class_target, dict) \
            else int(per_class_target)
        need = target - len(originals)
        if need < 0:
            raise DataError(f"class {label} already has {len(originals)} samples, "
                            f"target {target} is below that")
        if need == 0:
            continue
        streams = rng.spawn(need)
        for i in range(need):
            src = originals[i % len(originals)]
            image = augment_image(src.image, spec, streams[i])
            out.append(Sample(image=image, label=label,
                              source_path=f"{src.source_path}::aug{i // len(originals)}",
                              augmented_from=src.source_path,
                              split=src.split, fold=src.fold))
    return out


def resize_split(split, size):
    """Bring every sample (augmented ones already are) to size x size."""
    for s in split.all_samples():
        s.image = resize_image(s.image, size)
    return split


def write_manifest(samples, path):
    """CSV rows (path,label,split,fold,augmented_from) in list order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "split", "fold", "augmented_from"])
        for s in samples:
            writer.writerow([s.source_path, s.label, s.split or "",
                             "" if s.fold is None else s.fold,
                             s.augmented_from or ""])


def write_tensor_shard(samples, path):
    """Pack decoded samples into one file: an images tensor [N,3,H,W] followed
    by a labels tensor [N], both in the binary tensor container."""
    from .tensor import Tensor, save_tensor
    if not samples:
        raise DataError("cannot write an empty shard")
    shapes = {s.image.shape for s in samples}
    if len(shapes) > 1:
        raise DataError(f"shard needs uniform image shapes, got {sorted(shapes)}")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    labels = np.array([s.label for s in samples], dtype=np.float32)
    with open(path, "wb") as fh:
        save_tensor(Tensor(images), fh)
        save_tensor(Tensor(labels), fh)


def load_tensor_shard(path):
    """Inverse of write_tensor_shard; returns (images [N,3,H,W], labels [N])."""
    from .tensor import load_tensor
    with open(path, "rb") as fh:
        images = load_tensor(fh).data
        labels = load_tensor(fh).data.astype(np.int64)
    return images, labels


# -- synthetic data -------------------------------------------------------------------


def write_synthetic_blobs(root_dir, per_class=10, size=64, seed=0,
                          classes=("blue", "green", "red", "yellow")):
    """Tiny colour-blob dataset for smoke tests and the overfit sanity check.

    Each class has a distinct dominant colour, a bright blob at a random
    position, and pixel noise; trivially separable, so a working training
    loop must overfit it.
    """
    palette = {
        "blue": (0.15, 0.2, 0.9), "green": (0.1, 0.85, 0.2),
        "red": (0.9, 0.15, 0.1), "yellow": (0.9, 0.85, 0.1),
        "cyan": (0.1, 0.8, 0.8), "magenta": (0.8, 0.1, 0.8),
    }
    rng = np.random.default_rng(seed)
    root = Path(root_dir)
    for name in classes:
        base = palette[name]
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = np.empty((size, size, 3), dtype=np.float32)
            for c in range(3):
                img[:, :, c] = base[c]
            img += rng.normal(0.0, 0.08, size=img.shape)
            cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
            yy, xx = np.mgrid[0:size, 0:size]
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 8) ** 2)))
            img += 0.3 * blob[:, :, None]
            img = np.clip(img, 0.0, 1.0)
            Image.fromarray((img * 255).astype(np.uint8)).save(class_dir / f"{name}_{i:03d}.png")
    return root
