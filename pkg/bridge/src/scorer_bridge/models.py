"""CLIP-style checkpoint backend.

Loads an image/text dual encoder by Hugging Face model id and serves
unit-normalized embeddings. Preprocessing (resize, channel replication,
normalization) happens bridge-side and is echoed in the hello metadata;
clients always send raw [0, 1] floats at native resolution.

Checkpoints are not bundled; this backend requires the ``models`` extra
(torch + transformers) and a locally available model id.
"""

from __future__ import annotations

import numpy as np


class ModelBackend:
    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoModel, AutoProcessor
        except ImportError as exc:  # pragma: no cover - exercised without extra
            raise RuntimeError(
                "model backend needs the [models] extra (torch, transformers)"
            ) from exc

        self._torch = torch
        self.device = device
        self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.name = model_id
        with torch.no_grad():
            probe = torch.zeros(1, 3, 224, 224, device=device)
            self.dim = int(self.model.get_image_features(pixel_values=probe).shape[-1])
        size = getattr(self.processor, "image_processor", self.processor).size
        self.preprocessing = {
            "input": "raw [0,1] floats",
            "resize": str(size),
            "channels": "grayscale replicated to 3",
        }

    def _to_pixels(self, img: np.ndarray):
        arr = np.asarray(img, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError("expected (H, W, C)")
        if arr.shape[2] == 1:
            arr = np.repeat(arr, 3, axis=2)
        u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        from PIL import Image

        return Image.fromarray(u8, mode="RGB")

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        torch = self._torch
        inputs = self.processor(images=self._to_pixels(img), return_tensors="pt").to(self.device)
        with torch.no_grad():
            feats = self.model.get_image_features(**inputs)
        z = feats[0].cpu().double().numpy()
        return z / np.linalg.norm(z)

    def embed_texts(self, texts: list[str]) -> list[np.ndarray]:
        torch = self._torch
        inputs = self.processor(text=texts, return_tensors="pt", padding=True).to(self.device)
        with torch.no_grad():
            feats = self.model.get_text_features(**inputs)
        out = feats.cpu().double().numpy()
        return [z / np.linalg.norm(z) for z in out]
