"""Dataset ingest: Montgomery/Shenzhen loading, preprocessing, caching, splits.

Both collections are normalized to 256x256: images with bilinear
interpolation, masks with nearest-neighbor so they stay binary. Montgomery
stores the two lungs as separate mask files which are merged with a
pixelwise OR at native resolution before resizing. Source masks are
binarized at >127 to be robust to anti-aliased borders.

Expected directory layouts (see README for the download locations):

    montgomery/
        CXR_png/MCUCXR_*.png
        ManualMask/leftMask/MCUCXR_*.png
        ManualMask/rightMask/MCUCXR_*.png
    shenzhen/
        CXR_png/CHNCXR_*.png
        mask/CHNCXR_*_mask.png
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, FoldError

log = logging.getLogger(__name__)

RESOLUTION = 256
MASK_SOURCE_THRESHOLD = 127  # 8-bit source masks: >127 is foreground

# No download automation; these are printed when a dataset is missing.
DATASET_URLS = {
    "montgomery": "https://lhncbc.nlm.nih.gov/LHC-downloads/downloads.html#tuberculosis-image-data-sets",
    "shenzhen": "https://lhncbc.nlm.nih.gov/LHC-downloads/downloads.html#tuberculosis-image-data-sets",
}

SCHEME_HOLDOUT = "holdout_60_20_20"
SCHEME_KFOLD = "kfold_5"
ROLES = ("train", "val", "test")

_IMAGE_DIRS = ("CXR_png", "images", "CXR")
_LEFT_MASK_DIRS = ("ManualMask/leftMask", "leftMask", "ManualMask/left")
_RIGHT_MASK_DIRS = ("ManualMask/rightMask", "rightMask", "ManualMask/right")
_SHENZHEN_MASK_DIRS = ("mask", "masks", "Mask")


@dataclass
class ImageSample:
    id: str
    dataset: str
    image: np.ndarray  # uint8, 256x256, grayscale
    mask: np.ndarray  # uint8, 256x256, values in {0, 1}
    original_size: tuple  # (height, width) before resizing

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.image.tobytes())
        h.update(self.mask.tobytes())
        h.update(f"{self.original_size[0]}x{self.original_size[1]}".encode())
        return h.hexdigest()


@dataclass
class FoldPlan:
    dataset: str
    scheme: str
    seed: int
    assignment: dict  # sample id -> role string or fold index

    def role_ids(self, role: str):
        if self.scheme != SCHEME_HOLDOUT:
            raise FoldError(f"plan scheme {self.scheme} has no roles")
        return sorted(i for i, r in self.assignment.items() if r == role)

    def fold_ids(self, fold: int):
        if self.scheme != SCHEME_KFOLD:
            raise FoldError(f"plan scheme {self.scheme} has no folds")
        return sorted(i for i, f in self.assignment.items() if f == fold)

    @property
    def n_folds(self) -> int:
        return 5 if self.scheme == SCHEME_KFOLD else 0

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "dataset": self.dataset,
            "scheme": self.scheme,
            "seed": self.seed,
            "assignment": self.assignment,
        }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls(
            dataset=payload["dataset"],
            scheme=payload["scheme"],
            seed=int(payload["seed"]),
            assignment=payload["assignment"],
        )


def _find_subdir(root: Path, candidates) -> Path | None:
    for cand in candidates:
        p = root / cand
        if p.is_dir():
            return p
    return None


def _read_grayscale(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except Exception as exc:
        raise DatasetError(f"unreadable image file {path}: {exc}") from exc


def _resize_image(arr: np.ndarray) -> np.ndarray:
    im = Image.fromarray(arr, mode="L")
    return np.asarray(im.resize((RESOLUTION, RESOLUTION), Image.BILINEAR), dtype=np.uint8)


def _resize_mask(binary: np.ndarray) -> np.ndarray:
    im = Image.fromarray(binary.astype(np.uint8), mode="L")
    out = np.asarray(im.resize((RESOLUTION, RESOLUTION), Image.NEAREST), dtype=np.uint8)
    return (out > 0).astype(np.uint8)  # nearest keeps {0,1}; re-binarize anyway


def _binarize_source(mask8: np.ndarray) -> np.ndarray:
    return (mask8 > MASK_SOURCE_THRESHOLD).astype(np.uint8)


def load_montgomery(root_dir) -> list:
    """Load all Montgomery samples, merging per-lung masks with pixelwise OR."""
    root = Path(root_dir)
    img_dir = _find_subdir(root, _IMAGE_DIRS)
    left_dir = _find_subdir(root, _LEFT_MASK_DIRS)
    right_dir = _find_subdir(root, _RIGHT_MASK_DIRS)
    if img_dir is None or left_dir is None or right_dir is None:
        raise DatasetError(
            f"montgomery layout not found under {root}: need an image directory "
            f"({'/'.join(_IMAGE_DIRS)}) plus left/right mask directories"
        )
    image_files = sorted(img_dir.glob("*.png"))
    if not image_files:
        raise DatasetError(f"no images found in {img_dir}")

    missing = []
    samples = []
    for img_path in image_files:
        stem = img_path.stem
        left_path = left_dir / img_path.name
        right_path = right_dir / img_path.name
        if not left_path.is_file() or not right_path.is_file():
            missing.append(stem)
            continue
        image = _read_grayscale(img_path)
        left = _binarize_source(_read_grayscale(left_path))
        right = _binarize_source(_read_grayscale(right_path))
        if left.shape != image.shape or right.shape != image.shape:
            raise DatasetError(f"mask/image shape mismatch for sample {stem}")
        merged = np.logical_or(left, right).astype(np.uint8)
        samples.append(
            ImageSample(
                id=stem,
                dataset="montgomery",
                image=_resize_image(image),
                mask=_resize_mask(merged),
                original_size=image.shape,
            )
        )
    if missing:
        raise DatasetError(
            "missing left/right mask counterpart for sample(s): " + ", ".join(sorted(missing))
        )
    return samples


def find_shenzhen_pairs(root_dir):
    """Return (pairs, missing_ids): image/mask path pairs matched by stem."""
    root = Path(root_dir)
    img_dir = _find_subdir(root, _IMAGE_DIRS)
    mask_dir = _find_subdir(root, _SHENZHEN_MASK_DIRS)
    if img_dir is None or mask_dir is None:
        raise DatasetError(
            f"shenzhen layout not found under {root}: need an image directory "
            f"({'/'.join(_IMAGE_DIRS)}) plus a mask directory ({'/'.join(_SHENZHEN_MASK_DIRS)})"
        )
    image_files = sorted(img_dir.glob("*.png"))
    if not image_files:
        raise DatasetError(f"no images found in {img_dir}")
    pairs = []
    missing = []
    for img_path in image_files:
        stem = img_path.stem
        candidates = (mask_dir / f"{stem}_mask.png", mask_dir / img_path.name)
        mask_path = next((c for c in candidates if c.is_file()), None)
        if mask_path is None:
            missing.append(stem)
        else:
            pairs.append((img_path, mask_path))
    return pairs, missing


def load_shenzhen(root_dir) -> list:
    """Load Shenzhen samples; images without a mask are reported and skipped."""
    pairs, missing = find_shenzhen_pairs(root_dir)
    if missing:
        log.warning(
            "shenzhen: excluding %d image(s) without a mask: %s",
            len(missing),
            ", ".join(sorted(missing)),
        )
    samples = []
    for img_path, mask_path in pairs:
        image = _read_grayscale(img_path)
        mask = _binarize_source(_read_grayscale(mask_path))
        if mask.shape != image.shape:
            raise DatasetError(f"mask/image shape mismatch for sample {img_path.stem}")
        samples.append(
            ImageSample(
                id=img_path.stem,
                dataset="shenzhen",
                image=_resize_image(image),
                mask=_resize_mask(mask),
                original_size=image.shape,
            )
        )
    return samples


def load_dataset(name: str, root_dir) -> list:
    if name == "montgomery":
        return load_montgomery(root_dir)
    if name == "shenzhen":
        return load_shenzhen(root_dir)
    raise DatasetError(f"unknown dataset '{name}' (expected montgomery or shenzhen)")


# ---------------------------------------------------------------------------
# cache format: one npz per sample plus a manifest of ids and checksums
# ---------------------------------------------------------------------------


def save_cache(samples, out_dir) -> Path:
    """Write samples losslessly to ``out_dir`` and return the manifest path."""
    out = Path(out_dir)
    sample_dir = out / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    dataset = samples[0].dataset if samples else "unknown"
    for s in sorted(samples, key=lambda s: s.id):
        np.savez(
            sample_dir / f"{s.id}.npz",
            image=s.image,
            mask=s.mask,
            original_size=np.asarray(s.original_size, dtype=np.int64),
        )
        lines.append(f"{s.id}\t{s.checksum()}\t{s.original_size[0]}x{s.original_size[1]}")
    manifest = out / "manifest.txt"
    manifest.write_text(f"# dataset: {dataset}\n" + "\n".join(lines) + "\n")
    return manifest


def load_cache(cache_dir) -> list:
    """Reload a cached dataset, verifying every sample checksum."""
    cache = Path(cache_dir)
    manifest = cache / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"no manifest.txt in cache directory {cache}")
    header, *lines = manifest.read_text().strip().splitlines()
    dataset = header.split("dataset:", 1)[1].strip() if "dataset:" in header else "unknown"
    samples = []
    for line in lines:
        sid, checksum, _size = line.split("\t")
        path = cache / "samples" / f"{sid}.npz"
        if not path.is_file():
            raise DatasetError(f"cache entry missing for sample {sid}")
        with np.load(path) as data:
            sample = ImageSample(
                id=sid,
                dataset=dataset,
                image=data["image"],
                mask=data["mask"],
                original_size=tuple(int(v) for v in data["original_size"]),
            )
        if sample.checksum() != checksum:
            raise DatasetError(f"checksum mismatch for cached sample {sid}")
        samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# deterministic splits and folds
# ---------------------------------------------------------------------------


def make_fold_plan(samples, scheme: str, seed: int = 42) -> FoldPlan:
    """Assign samples to a 60/20/20 holdout or to 5 balanced folds.

    The shuffle is a seeded permutation of the sorted id list, so identical
    (dataset, scheme, seed) inputs always produce identical assignments
    regardless of input order.
    """
    ids = sorted(s.id for s in samples)
    if len(set(ids)) != len(ids):
        raise FoldError("duplicate sample ids in input")
    dataset = samples[0].dataset if samples else "unknown"
    n = len(ids)
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(n)]

    if scheme == SCHEME_HOLDOUT:
        if n < 3:
            raise FoldError(f"holdout split needs at least 3 samples, got {n}")
        n_test = n // 5  # floor(0.2 * n)
        n_val = n // 5
        assignment = {}
        for i, sid in enumerate(shuffled):
            if i < n_test:
                assignment[sid] = "test"
            elif i < n_test + n_val:
                assignment[sid] = "val"
            else:
                assignment[sid] = "train"
    elif scheme == SCHEME_KFOLD:
        if n < 5:
            raise FoldError(f"5-fold plan needs at least 5 samples, got {n}")
        assignment = {}
        for fold, chunk in enumerate(np.array_split(np.asarray(shuffled, dtype=object), 5)):
            for sid in chunk:
                assignment[str(sid)] = fold
    else:
        raise FoldError(f"unknown scheme '{scheme}'")

    return FoldPlan(dataset=dataset, scheme=scheme, seed=seed, assignment=assignment)


def samples_by_id(samples) -> dict:
    return {s.id: s for s in samples}
