"""Model adapters: a narrow interface over promptable segmentation backends.

Two backends implement it:

* ``StubSegmenter`` (here): a tiny numpy model with a frozen random
  encoder and a trainable per-cell decoder head. It honors the full
  contract (prompt-conditioned probabilistic masks, decoder-only
  gradients, deterministic predictions) so every pipeline stage and test
  runs without the real checkpoint.
* ``sam_backend.SamSegmenter``: the real pretrained model, loaded lazily
  so torch/segment-anything stay optional.

The training loop only ever touches ``trainable_parameters()`` (live
numpy buffers), ``loss_and_grads()`` and ``sync_trainable()``, which is
what keeps it backend-agnostic.
"""

import hashlib
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import RESOLUTION, ImageSample
from .errors import ModelError
from .losses import dice_focal_loss_grad
from .prompts import PromptSet

log = logging.getLogger(__name__)

CHECKPOINT_ENV = "SEG_CHECKPOINT"

GRID = 32
PATCH = RESOLUTION // GRID
POINT_SIGMA = 8.0  # px; spread of the rendered point-prompt bumps


@dataclass
class SoftMask:
    probs: np.ndarray  # float64, 256x256, values in [0, 1]
    sample_id: str
    prompt_mode: str


def prompt_groups(prompts: PromptSet):
    """Split a prompt set into per-prediction groups.

    Each box forms its own group carrying the points that fall inside it;
    with no boxes, all points form a single group. Per-group predictions
    are merged by pixelwise maximum.
    """
    prompts.validate()
    if not prompts.boxes:
        return [(None, list(prompts.points))]
    groups = []
    for box in prompts.boxes:
        x0, y0, x1, y1 = box
        inside = [p for p in prompts.points if x0 <= p[0] <= x1 and y0 <= p[1] <= y1]
        groups.append((box, inside))
    return groups


def render_prompt_maps(box, points):
    """Rasterize one prompt group to (point_map, box_map), each 256x256."""
    point_map = np.zeros((RESOLUTION, RESOLUTION))
    if points:
        yy, xx = np.mgrid[0:RESOLUTION, 0:RESOLUTION]
        for x, y, _label in points:
            point_map += np.exp(
                -((xx - x) ** 2 + (yy - y) ** 2) / (2.0 * POINT_SIGMA**2)
            )
        np.clip(point_map, 0.0, 1.0, out=point_map)
    box_map = np.zeros((RESOLUTION, RESOLUTION))
    if box is not None:
        x0, y0, x1, y1 = box
        box_map[y0 : y1 + 1, x0 : x1 + 1] = 1.0
    return point_map, box_map


def _block_mean(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(GRID, PATCH, GRID, PATCH).mean(axis=(1, 3))


def _bilinear_upsample_matrix() -> np.ndarray:
    """(256, 32) interpolation matrix; used for rows and columns alike."""
    R = np.zeros((RESOLUTION, GRID))
    for i in range(RESOLUTION):
        g = (i + 0.5) / PATCH - 0.5
        i0 = int(np.floor(g))
        w = g - i0
        R[i, min(max(i0, 0), GRID - 1)] += 1.0 - w
        R[i, min(max(i0 + 1, 0), GRID - 1)] += w
    return R


_UPSAMPLE = _bilinear_upsample_matrix()


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class StubSegmenter:
    """Small numpy stand-in with the same surface as the real adapter.

    A frozen random two-layer encoder turns each 8x8 image patch into 16
    features; the trainable decoder head maps [patch features, point/box
    prompt coverage, cell position] to a per-cell logit, which is
    bilinearly upsampled and squashed to probabilities.
    """

    input_resolution = RESOLUTION
    trainable_scope = "decoder_only"

    N_FEAT = 16
    N_HIDDEN = 24
    N_IN = N_FEAT + 4  # + point coverage, box coverage, row, col

    def __init__(self, checkpoint_id: str = "stub-small"):
        self.checkpoint_id = checkpoint_id
        rng = np.random.default_rng(zlib.crc32(checkpoint_id.encode()))
        d = PATCH * PATCH
        self.enc_w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 128))
        self.enc_b1 = rng.normal(0.0, 0.1, size=128)
        self.enc_w2 = rng.normal(0.0, 1.0 / np.sqrt(128), size=(128, self.N_FEAT))
        self.enc_b2 = rng.normal(0.0, 0.1, size=self.N_FEAT)
        self.dec = {
            "dec_w1": rng.normal(0.0, 1.0 / np.sqrt(self.N_IN), size=(self.N_IN, self.N_HIDDEN)),
            "dec_b1": np.zeros(self.N_HIDDEN),
            "dec_w2": rng.normal(0.0, 1.0 / np.sqrt(self.N_HIDDEN), size=(self.N_HIDDEN, 1)),
            "dec_b2": np.zeros(1),
        }
        pos = (np.arange(GRID) / (GRID - 1)) - 0.5
        self._pos_row = np.repeat(pos, GRID)
        self._pos_col = np.tile(pos, GRID)

    # -- parameter bookkeeping -------------------------------------------

    def parameter_census(self):
        n_enc = sum(p.size for p in (self.enc_w1, self.enc_b1, self.enc_w2, self.enc_b2))
        n_dec = sum(p.size for p in self.dec.values())
        return n_enc + n_dec, n_dec

    def trainable_parameters(self) -> dict:
        return self.dec

    def encoder_parameters(self) -> dict:
        return {
            "enc_w1": self.enc_w1.copy(),
            "enc_b1": self.enc_b1.copy(),
            "enc_w2": self.enc_w2.copy(),
            "enc_b2": self.enc_b2.copy(),
        }

    def sync_trainable(self):
        pass  # numpy buffers are updated in place

    def get_trainable_state(self) -> dict:
        return {k: v.copy() for k, v in self.dec.items()}

    def set_trainable_state(self, state: dict):
        for k in self.dec:
            self.dec[k][...] = state[k]

    def save_trainable(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, checkpoint_id=np.asarray(self.checkpoint_id), **self.dec)

    def load_trainable(self, path):
        with np.load(path) as data:
            self.set_trainable_state({k: data[k] for k in self.dec})

    # -- forward / backward ------------------------------------------------

    def _encode_image(self, image: np.ndarray) -> np.ndarray:
        img = image.astype(np.float64) / 255.0
        patches = (
            img.reshape(GRID, PATCH, GRID, PATCH).transpose(0, 2, 1, 3).reshape(GRID * GRID, -1)
        )
        h = np.tanh(patches @ self.enc_w1 + self.enc_b1)
        return np.tanh(h @ self.enc_w2 + self.enc_b2)

    def _group_forward(self, feats: np.ndarray, box, points):
        point_map, box_map = render_prompt_maps(box, points)
        x = np.concatenate(
            [
                feats,
                _block_mean(point_map).reshape(-1, 1),
                _block_mean(box_map).reshape(-1, 1),
                self._pos_row.reshape(-1, 1),
                self._pos_col.reshape(-1, 1),
            ],
            axis=1,
        )
        h = np.tanh(x @ self.dec["dec_w1"] + self.dec["dec_b1"])
        logits = (h @ self.dec["dec_w2"] + self.dec["dec_b2"]).reshape(GRID, GRID)
        up = _UPSAMPLE @ logits @ _UPSAMPLE.T
        probs = _sigmoid(up)
        return probs, (x, h, probs)

    def _group_backward(self, cache, dprobs):
        x, h, probs = cache
        dup = dprobs * probs * (1.0 - probs)
        dlogits = (_UPSAMPLE.T @ dup @ _UPSAMPLE).reshape(-1, 1)
        grads = {}
        grads["dec_w2"] = h.T @ dlogits
        grads["dec_b2"] = dlogits.sum(axis=0)
        dh = dlogits @ self.dec["dec_w2"].T
        dpre = dh * (1.0 - h * h)
        grads["dec_w1"] = x.T @ dpre
        grads["dec_b1"] = dpre.sum(axis=0)
        return grads

    def _forward_all(self, image: np.ndarray, prompts: PromptSet):
        feats = self._encode_image(image)
        groups = prompt_groups(prompts)
        results = [self._group_forward(feats, box, pts) for box, pts in groups]
        stack = np.stack([p for p, _ in results])
        merged = stack.max(axis=0)
        winner = np.argmax(stack, axis=0)
        return merged, winner, [c for _, c in results]

    def predict(self, sample: ImageSample, prompts: PromptSet) -> SoftMask:
        merged, _, _ = self._forward_all(sample.image, prompts)
        return SoftMask(probs=merged, sample_id=sample.id, prompt_mode=prompts.mode)

    def loss_and_grads(self, batch, w_dice=1.0, w_focal=1.0, gamma=2.0):
        """Mean loss and mean decoder gradients over [(sample, prompts), ...].

        The pixelwise-max merge routes each pixel's gradient to the group
        that produced the maximum (the subgradient of max).
        """
        total = 0.0
        grads = {k: np.zeros_like(v) for k, v in self.dec.items()}
        for sample, prompts in batch:
            merged, winner, caches = self._forward_all(sample.image, prompts)
            loss, dmerged = dice_focal_loss_grad(
                merged, sample.mask, w_dice=w_dice, w_focal=w_focal, gamma=gamma
            )
            total += loss
            for gi, cache in enumerate(caches):
                dprobs = np.where(winner == gi, dmerged, 0.0)
                for k, g in self._group_backward(cache, dprobs).items():
                    grads[k] += g
        n = len(batch)
        for k in grads:
            grads[k] /= n
        return total / n, grads


# ---------------------------------------------------------------------------
# checkpoint handling and backend dispatch
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def verify_checkpoint(path, expected: str | None = None) -> str:
    """Verify a checkpoint's sha256.

    With no ``expected`` digest, the first load records a sidecar
    ``<file>.sha256`` and later loads verify against it, catching
    corruption between runs.
    """
    path = Path(path)
    if not path.is_file():
        raise ModelError(
            f"checkpoint not found at {path}; download the pretrained weights and "
            f"point {CHECKPOINT_ENV} (or the config) at the file"
        )
    digest = sha256_file(path)
    if expected is not None:
        if digest != expected:
            raise ModelError(f"checkpoint checksum mismatch for {path}: "
                             f"expected {expected}, got {digest}")
        return digest
    sidecar = path.with_suffix(path.suffix + ".sha256")
    if sidecar.is_file():
        recorded = sidecar.read_text().split()[0]
        if digest != recorded:
            raise ModelError(
                f"checkpoint checksum mismatch for {path}: recorded {recorded}, got {digest}"
            )
    else:
        sidecar.write_text(digest + "\n")
        log.info("recorded checkpoint checksum %s for %s", digest[:12], path.name)
    return digest


def load_model(checkpoint_id: str = "stub-small", device: str = "cpu",
               checkpoint_path=None, expected_sha256: str | None = None):
    """Build a segmentation backend.

    ``stub*`` ids return the numpy stub. Anything else is treated as a
    pretrained variant name (e.g. ``vit_b``) and resolved through the
    optional real backend; its checkpoint comes from ``checkpoint_path``
    or the SEG_CHECKPOINT environment variable.
    """
    if checkpoint_id.startswith("stub"):
        model = StubSegmenter(checkpoint_id)
        n_total, n_dec = model.parameter_census()
        log.info("loaded %s: %d parameters, %d trainable", checkpoint_id, n_total, n_dec)
        return model

    path = checkpoint_path or os.environ.get(CHECKPOINT_ENV)
    if not path:
        raise ModelError(
            f"no checkpoint configured for '{checkpoint_id}': set {CHECKPOINT_ENV} or "
            "pass checkpoint_path"
        )
    verify_checkpoint(path, expected=expected_sha256)
    from . import sam_backend  # deferred: requires torch + segment-anything

    return sam_backend.SamSegmenter(checkpoint_id, path, device=device)
