"""Prompt construction: perturbed bounding boxes and mean-image points.

Point prompts are derived once per dataset from the pixelwise mean of the
*training* masks: the mean is thresholded, the two largest connected
components (the lungs) are kept, and each contributes its centroid plus
deterministic interior points taken at evenly spaced erosion depths.
Box prompts are per-sample tight boxes around the two largest mask
components, optionally jittered by a seeded uniform integer offset.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .datasets import RESOLUTION
from .errors import PromptError

log = logging.getLogger(__name__)

MODES = ("box", "points", "both")
_CONN8 = np.ones((3, 3), dtype=int)


@dataclass
class PromptSet:
    points: list = field(default_factory=list)  # (x, y, label) with label 1 = foreground
    boxes: list = field(default_factory=list)  # (x_min, y_min, x_max, y_max)
    mode: str = "points"

    def validate(self):
        if self.mode not in MODES:
            raise PromptError(f"unknown prompt mode '{self.mode}'")
        if self.mode == "points" and self.boxes:
            raise PromptError("mode=points must not carry boxes")
        if self.mode == "box" and self.points:
            raise PromptError("mode=box must not carry points")
        if not self.points and not self.boxes:
            raise PromptError("empty prompt set")
        for x, y, label in self.points:
            if not (0 <= x < RESOLUTION and 0 <= y < RESOLUTION):
                raise PromptError(f"point ({x},{y}) outside image bounds")
            if label != 1:
                raise PromptError("only foreground point labels are supported")
        for x0, y0, x1, y1 in self.boxes:
            if not (0 <= x0 < x1 < RESOLUTION and 0 <= y0 < y1 < RESOLUTION):
                raise PromptError(f"degenerate or out-of-bounds box {(x0, y0, x1, y1)}")
        return self

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "points": [list(p) for p in self.points],
            "boxes": [list(b) for b in self.boxes],
        }

    @classmethod
    def from_dict(cls, d) -> "PromptSet":
        return cls(
            points=[tuple(p) for p in d.get("points", [])],
            boxes=[tuple(b) for b in d.get("boxes", [])],
            mode=d["mode"],
        )


@dataclass
class MeanImage:
    dataset: str
    pixel_mean: np.ndarray  # float64, 256x256, values in [0, 1]
    source_ids: list

    def audit(self, plan):
        """Raise unless every source sample carried the training role."""
        train = set(plan.role_ids("train"))
        leaked = [i for i in self.source_ids if i not in train]
        if leaked:
            raise PromptError(f"mean image built from non-training sample(s): {leaked}")
        return self


def compute_mean_image(samples, plan_or_ids) -> MeanImage:
    """Pixelwise mean of the training-role masks.

    ``plan_or_ids`` is either a holdout FoldPlan (its train role is used)
    or an explicit iterable of ids, which is how per-fold training subsets
    are passed during cross-validation.
    """
    if hasattr(plan_or_ids, "role_ids"):
        train_ids = set(plan_or_ids.role_ids("train"))
    else:
        train_ids = set(plan_or_ids)
    used = sorted(s.id for s in samples if s.id in train_ids)
    chosen = [s for s in samples if s.id in train_ids]
    if not chosen:
        raise PromptError("no training-role samples to average")
    stack = np.stack([s.mask.astype(np.float64) for s in chosen])
    mean = stack.mean(axis=0)
    dataset = chosen[0].dataset
    return MeanImage(dataset=dataset, pixel_mean=mean, source_ids=used)


def _largest_components(binary: np.ndarray, keep: int):
    """Connected components (8-connectivity), largest first.

    Ties in area break by first-scanned pixel so the order is deterministic.
    """
    labels, n = ndimage.label(binary, structure=_CONN8)
    if n == 0:
        return []
    areas = np.bincount(labels.ravel())[1:]  # skip background
    order = sorted(range(1, n + 1), key=lambda lb: (-areas[lb - 1], lb))
    return [(labels == lb) for lb in order[:keep]]


def _interior_point(region: np.ndarray, distance: np.ndarray):
    """Centroid of ``region``, or its max-distance-to-background pixel when
    the centroid falls outside (crescent-shaped regions)."""
    rows, cols = np.nonzero(region)
    r = int(round(rows.mean()))
    c = int(round(cols.mean()))
    if region[r, c]:
        return c, r
    masked = np.where(region, distance, -1)
    flat = int(np.argmax(masked))
    r, c = np.unravel_index(flat, region.shape)
    return int(c), int(r)


def extract_points(mean: MeanImage, k_per_component: int = 3, level: float = 0.5) -> PromptSet:
    """Derive k foreground points per lung from a thresholded mean image.

    The mean is binarized at ``level`` and the two largest components kept.
    Each contributes its centroid plus (k-1) interior points: the component
    is eroded to evenly spaced depths (chessboard distance matches the 3x3
    structuring element) and the centroid of each eroded region is taken.
    """
    if not 0.0 < level < 1.0:
        raise PromptError(f"level must lie in (0, 1), got {level}")
    if k_per_component < 1:
        raise PromptError(f"k_per_component must be >= 1, got {k_per_component}")
    region = mean.pixel_mean >= level
    components = _largest_components(region, keep=2)
    if len(components) < 2:
        raise PromptError(
            f"found {len(components)} component(s) at level {level}; "
            "expected two lungs - try a lower level"
        )
    points = []
    for comp in components:
        distance = ndimage.distance_transform_cdt(comp, metric="chessboard")
        d_max = int(distance.max())
        depths = [(j * d_max) // k_per_component for j in range(k_per_component)]
        for depth in depths:
            eroded = distance > depth
            x, y = _interior_point(eroded, distance)
            points.append((x, y, 1))
    ps = PromptSet(points=points, boxes=[], mode="points")
    return ps.validate()


def _tight_box(component: np.ndarray):
    rows, cols = np.nonzero(component)
    return int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())


def _jitter_box(box, jitter: int, rng) -> tuple:
    x0, y0, x1, y1 = box
    if jitter > 0:
        dx0, dy0, dx1, dy1 = (int(v) for v in rng.integers(-jitter, jitter + 1, size=4))
        x0, y0, x1, y1 = x0 + dx0, y0 + dy0, x1 + dx1, y1 + dy1
    x0 = min(max(x0, 0), RESOLUTION - 2)
    y0 = min(max(y0, 0), RESOLUTION - 2)
    x1 = min(max(x1, 0), RESOLUTION - 1)
    y1 = min(max(y1, 0), RESOLUTION - 1)
    if x1 <= x0:
        x1 = x0 + 1
    if y1 <= y0:
        y1 = y0 + 1
    return x0, y0, x1, y1


def extract_box(mask: np.ndarray, jitter: int = 0, seed: int = 42, single_box: bool = False) -> PromptSet:
    """Tight per-lung boxes, each perturbed by uniform offsets in [-jitter, jitter].

    Perturbed coordinates are clipped to the image and kept strictly
    ordered. ``single_box`` swaps the per-lung pair for one box enclosing
    the whole foreground.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.any(mask):
        raise PromptError("box extraction needs a non-empty 2-D mask")
    if jitter < 0:
        raise PromptError(f"jitter must be >= 0, got {jitter}")
    rng = np.random.default_rng(seed)
    if single_box:
        tight = [_tight_box(mask != 0)]
    else:
        components = _largest_components(mask != 0, keep=2)
        if len(components) == 1:
            log.warning("single mask component; emitting one box")
        tight = [_tight_box(c) for c in components]
    boxes = sorted(_jitter_box(b, jitter, rng) for b in tight)
    ps = PromptSet(points=[], boxes=boxes, mode="box")
    return ps.validate()


def combine(points: PromptSet, boxes: PromptSet) -> PromptSet:
    """Merge a points set and a box set into a mode='both' prompt."""
    ps = PromptSet(points=list(points.points), boxes=list(boxes.boxes), mode="both")
    return ps.validate()


def build_prompts(samples, mean: MeanImage, mode: str, k_per_component=3, level=0.5,
                  jitter=0, seed=42, single_box=False) -> dict:
    """Per-sample prompt sets for one mode; returns {sample_id: PromptSet}.

    Point prompts are shared across samples (they come from the mean
    image); box prompts are per-sample with independent jitter draws, each
    seeded by (seed, sample index) so the result is order-independent.
    """
    if mode not in MODES:
        raise PromptError(f"unknown prompt mode '{mode}'")
    out = {}
    point_set = None
    if mode in ("points", "both"):
        point_set = extract_points(mean, k_per_component=k_per_component, level=level)
    for idx, sample in enumerate(sorted(samples, key=lambda s: s.id)):
        if mode == "points":
            out[sample.id] = point_set
            continue
        box_set = extract_box(
            sample.mask, jitter=jitter, seed=seed + idx, single_box=single_box
        )
        if mode == "box":
            out[sample.id] = box_set
        else:
            out[sample.id] = combine(point_set, box_set)
    return out


def write_prompt_manifest(path, prompts: dict):
    """Write prompts as a JSONL manifest, one line per sample id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for sid in sorted(prompts):
            fh.write(json.dumps({"id": sid, **prompts[sid].to_dict()}) + "\n")


def read_prompt_manifest(path) -> dict:
    prompts = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            prompts[d["id"]] = PromptSet.from_dict(d)
    return prompts
