"""Sliding-window recognition over a live frame stream."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .data import check_box, crop_and_resize, to_network_input


@dataclass
class Prediction:
    label: Optional[int]
    confidence: float
    scores: np.ndarray


@torch.no_grad()
def predict_clip(model, clip: torch.Tensor) -> np.ndarray:
    """Cosine similarity between the clip embedding and every class centre.

    ``clip`` is one preprocessed (3, T, S, S) tensor; no test-time augmentation.
    """
    was_training = model.training
    model.eval()
    try:
        emb, _ = model(clip.unsqueeze(0))
        return model.cosines(emb, use_pr_product=False)[0].numpy()
    finally:
        model.train(was_training)


class StreamRecognizer:
    """Keeps the last ``window`` (frame, box) pairs and predicts once the buffer is full.

    Each full window is cropped by the union of its boxes, resized to the model's
    input size and scored against the class centres. A prediction whose best
    cosine falls below ``threshold`` carries no label.
    """

    def __init__(self, model, threshold: float = 0.5, stride: int = 1):
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.model = model
        self.threshold = threshold
        self.stride = stride
        _, self.window, self.size, _ = model.input_shape
        self.buffer = deque(maxlen=self.window)
        self._full_pushes = 0

    def reset(self) -> None:
        self.buffer.clear()
        self._full_pushes = 0

    @property
    def ready(self) -> bool:
        return len(self.buffer) == self.window

    def push_frame(self, frame: np.ndarray, box) -> Optional[Prediction]:
        """Add one (H, W, 3) frame in [0, 1]; returns a prediction or ``None`` while warming up.

        Frames with an invalid box are rejected with ``ValueError`` and leave the buffer untouched.
        """
        box = np.asarray(box, dtype=np.float64).reshape(4)
        check_box(box)
        h, w = frame.shape[:2]
        if box[2] <= 0 or box[3] <= 0 or box[0] >= w or box[1] >= h:
            raise ValueError(f"box {tuple(box)} lies outside the {w}x{h} frame")
        self.buffer.append((np.asarray(frame, dtype=np.float32), box))
        if not self.ready:
            return None
        self._full_pushes += 1
        if (self._full_pushes - 1) % self.stride:
            return None
        return self.predict_buffer()

    def predict_buffer(self) -> Prediction:
        frames = np.stack([f for f, _ in self.buffer])
        boxes = np.stack([b for _, b in self.buffer])
        clip = crop_and_resize(frames, boxes, "max", self.size)
        scores = predict_clip(self.model, to_network_input(clip))
        best = int(np.argmax(scores))
        confidence = float(scores[best])
        label = best if confidence >= self.threshold else None
        return Prediction(label, confidence, scores)
