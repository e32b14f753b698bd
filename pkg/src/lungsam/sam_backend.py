"""Adapter for the real pretrained promptable segmentation model.

Optional: importing this module requires ``torch`` and the
``segment-anything`` package (install with ``pip install lungsam[sam]``),
plus a downloaded checkpoint. Everything else in the package runs on the
numpy stub without these.

The adapter keeps the image and prompt encoders frozen and exposes the
mask decoder's weights as live numpy mirrors, so the same numpy Adam
loop drives both this backend and the stub: gradients flow torch-side
from ``probs.backward(dL/dp)`` with dL/dp supplied by the shared
analytic loss gradient.
"""

import logging

import numpy as np

from .datasets import RESOLUTION, ImageSample
from .errors import ModelError
from .losses import dice_focal_loss_grad
from .models import SoftMask, prompt_groups
from .prompts import PromptSet

log = logging.getLogger(__name__)

try:
    import torch
    from segment_anything import sam_model_registry
    from segment_anything.utils.transforms import ResizeLongestSide

    _IMPORT_ERROR = None
except ImportError as exc:  # pragma: no cover - depends on optional installs
    torch = None
    _IMPORT_ERROR = exc

VARIANTS = ("vit_b", "vit_l", "vit_h")


def _require_imports():
    if torch is None:
        raise ModelError(
            "the real segmentation backend needs torch and segment-anything "
            f"(pip install 'lungsam[sam]'); import failed with: {_IMPORT_ERROR}"
        )


class SamSegmenter:
    """Decoder-only trainable wrapper around the pretrained model."""

    trainable_scope = "decoder_only"

    def __init__(self, variant: str, checkpoint_path, device: str = "cpu",
                 cache_embeddings: bool = True):
        _require_imports()
        if variant not in VARIANTS:
            raise ModelError(f"unknown model variant '{variant}'; expected one of {VARIANTS}")
        self.checkpoint_id = variant
        self.device = torch.device("cuda" if device in ("gpu", "cuda") else "cpu")
        try:
            self.sam = sam_model_registry[variant](checkpoint=str(checkpoint_path))
        except Exception as exc:
            raise ModelError(f"failed to load checkpoint {checkpoint_path}: {exc}") from exc
        self.sam.to(self.device)
        self.input_resolution = self.sam.image_encoder.img_size
        self._transform = ResizeLongestSide(self.input_resolution)

        for name, param in self.sam.named_parameters():
            param.requires_grad_(name.startswith("mask_decoder."))

        self._dec_params = {
            name: p for name, p in self.sam.named_parameters() if p.requires_grad
        }
        self._dec_np = {
            name: p.detach().cpu().numpy().copy() for name, p in self._dec_params.items()
        }
        self.cache_embeddings = cache_embeddings
        self._embedding_cache = {}

    # -- parameter bookkeeping -------------------------------------------

    def parameter_census(self):
        n_total = sum(p.numel() for p in self.sam.parameters())
        n_dec = sum(p.numel() for p in self._dec_params.values())
        return n_total, n_dec

    def trainable_parameters(self) -> dict:
        return self._dec_np

    def encoder_parameters(self) -> dict:
        return {
            name: p.detach().cpu().numpy().copy()
            for name, p in self.sam.named_parameters()
            if not p.requires_grad
        }

    def sync_trainable(self):
        with torch.no_grad():
            for name, arr in self._dec_np.items():
                self._dec_params[name].copy_(torch.from_numpy(arr).to(self.device))

    def get_trainable_state(self) -> dict:
        return {k: v.copy() for k, v in self._dec_np.items()}

    def set_trainable_state(self, state: dict):
        for k in self._dec_np:
            self._dec_np[k][...] = state[k]
        self.sync_trainable()

    def save_trainable(self, path):
        import pathlib

        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, checkpoint_id=np.asarray(self.checkpoint_id), **self._dec_np)

    def load_trainable(self, path):
        with np.load(path) as data:
            self.set_trainable_state({k: data[k] for k in self._dec_np})

    # -- prediction ---------------------------------------------------------

    def _embed_image(self, sample: ImageSample):
        if self.cache_embeddings and sample.id in self._embedding_cache:
            return self._embedding_cache[sample.id]
        rgb = np.repeat(sample.image[..., None], 3, axis=2)
        resized = self._transform.apply_image(rgb)
        tensor = torch.as_tensor(resized, device=self.device)
        tensor = tensor.permute(2, 0, 1).contiguous()[None].float()
        with torch.no_grad():
            batched = self.sam.preprocess(tensor)
            embedding = self.sam.image_encoder(batched)
        entry = (embedding, tensor.shape[-2:])
        if self.cache_embeddings:
            self._embedding_cache[sample.id] = entry
        return entry

    def _encode_prompts(self, box, points):
        coords = labels = boxes = None
        size = (RESOLUTION, RESOLUTION)
        if points:
            pts = np.asarray([[p[0], p[1]] for p in points], dtype=np.float64)
            pts = self._transform.apply_coords(pts, size)
            coords = torch.as_tensor(pts, device=self.device).float()[None]
            labels = torch.ones(1, len(points), device=self.device).int()
        if box is not None:
            b = self._transform.apply_boxes(np.asarray([box], dtype=np.float64), size)
            boxes = torch.as_tensor(b, device=self.device).float()
        with torch.no_grad():
            sparse, dense = self.sam.prompt_encoder(
                points=(coords, labels) if coords is not None else None,
                boxes=boxes,
                masks=None,
            )
        return sparse, dense

    def _group_probs(self, embedding, input_size, box, points):
        sparse, dense = self._encode_prompts(box, points)
        low_res, _iou = self.sam.mask_decoder(
            image_embeddings=embedding,
            image_pe=self.sam.prompt_encoder.get_dense_pe(),
            sparse_prompt_embeddings=sparse,
            dense_prompt_embeddings=dense,
            multimask_output=False,
        )
        masks = self.sam.postprocess_masks(low_res, input_size, (RESOLUTION, RESOLUTION))
        return torch.sigmoid(masks[0, 0])

    def _merged_probs(self, sample: ImageSample, prompts: PromptSet):
        embedding, input_size = self._embed_image(sample)
        groups = prompt_groups(prompts)
        probs = [self._group_probs(embedding, input_size, box, pts) for box, pts in groups]
        merged = probs[0]
        for p in probs[1:]:
            merged = torch.maximum(merged, p)
        return merged

    def predict(self, sample: ImageSample, prompts: PromptSet) -> SoftMask:
        self.sam.eval()
        with torch.no_grad():
            merged = self._merged_probs(sample, prompts)
        return SoftMask(
            probs=merged.detach().cpu().numpy().astype(np.float64),
            sample_id=sample.id,
            prompt_mode=prompts.mode,
        )

    # -- training -----------------------------------------------------------

    def loss_and_grads(self, batch, w_dice=1.0, w_focal=1.0, gamma=2.0):
        """Mean loss and decoder gradients; dL/dp comes from the shared
        analytic loss gradient and is injected into autograd."""
        self.sam.train()
        for p in self._dec_params.values():
            p.grad = None
        total = 0.0
        for sample, prompts in batch:
            merged = self._merged_probs(sample, prompts)
            probs_np = merged.detach().cpu().numpy().astype(np.float64)
            loss, dprobs = dice_focal_loss_grad(
                probs_np, sample.mask, w_dice=w_dice, w_focal=w_focal, gamma=gamma
            )
            total += loss
            merged.backward(torch.as_tensor(dprobs, device=self.device).float())
        n = len(batch)
        grads = {}
        for name, p in self._dec_params.items():
            g = p.grad
            if g is None:
                grads[name] = np.zeros_like(self._dec_np[name])
            else:
                grads[name] = (g.detach().cpu().numpy() / n).astype(
                    self._dec_np[name].dtype, copy=False
                )
        return total / n, grads
