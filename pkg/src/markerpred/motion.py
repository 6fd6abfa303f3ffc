"""Marker sequence container shared by every stage of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


class MotionError(ValueError):
    """Malformed or mismatched motion data."""


@dataclass
class MotionSequence:
    """Time-ordered marker frames, shape (T, 3V), in meters.

    ``joints`` (T, J, 3) and ``body`` (T, 75) are optional ground-truth
    tracks kept for synthetic data; models only ever see ``frames``.
    """

    frames: np.ndarray
    frame_rate: float
    layout: str
    joints: np.ndarray | None = None
    body: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise MotionError(f"frames must be (T>=1, 3V), got {self.frames.shape}")
        if self.frames.shape[1] % 3:
            raise MotionError("frame width must be a multiple of 3")
        if not np.all(np.isfinite(self.frames)):
            raise MotionError("frames contain non-finite values")
        for name in ("joints", "body"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape[0] != self.frames.shape[0]:
                    raise MotionError(f"{name} track length {arr.shape[0]} != {self.frames.shape[0]} frames")
                setattr(self, name, arr)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_markers(self) -> int:
        return self.frames.shape[1] // 3

    def points(self) -> np.ndarray:
        return self.frames.reshape(self.n_frames, self.n_markers, 3)

    def slice(self, start: int, stop: int, step: int = 1) -> "MotionSequence":
        s = np.s_[start:stop:step]
        return replace(
            self,
            frames=self.frames[s].copy(),
            frame_rate=self.frame_rate / step,
            joints=None if self.joints is None else self.joints[s].copy(),
            body=None if self.body is None else self.body[s].copy(),
            meta=dict(self.meta),
        )


def split_condition_future(clip: MotionSequence, n_condition: int = 15) -> tuple[MotionSequence, MotionSequence]:
    """Split one clip so the future's first frame follows the last condition frame."""
    if clip.n_frames <= n_condition:
        raise MotionError(f"clip of {clip.n_frames} frames cannot hold {n_condition} condition frames")
    return clip.slice(0, n_condition), clip.slice(n_condition, clip.n_frames)


def stack_frames(seqs) -> np.ndarray:
    """(B, T, 3V) array from equally long sequences sharing one layout."""
    seqs = list(seqs)
    layouts = {s.layout for s in seqs}
    if len(layouts) > 1:
        raise MotionError(f"mixed layouts {sorted(layouts)}")
    lengths = {s.n_frames for s in seqs}
    if len(lengths) > 1:
        raise MotionError(f"mixed sequence lengths {sorted(lengths)}")
    return np.stack([s.frames for s in seqs])
