"""Evaluation metrics for sets of predicted futures.

Distances between frames use the Euclidean norm of the whole marker frame
vector.  Samples are arrays of shape (K, N, D); ground truth is (N, D).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import MarkerLayout, load_layout, load_skeleton
from .dct import dct_forward
from .motion import MotionError, MotionSequence

HEEL_MARKERS = ("LHEE", "RHEE")
SKATE_HEIGHT = 0.05      # m
SKATE_SPEED = 0.075      # m/s
PART_GROUPS = {
    "head": ("LFHD", "RFHD", "RBHD", "LBHD"),
    "upper_torso": ("RSHO", "LSHO", "CLAV", "C7"),
    "lower_torso": ("RFWT", "LFWT", "LBWT", "RBWT"),
}
LIMB_BONES = (
    ("left_shoulder", "left_elbow"), ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"), ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"), ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"), ("right_knee", "right_ankle"),
)
DEFAULT_ETA = 0.5


class MetricError(ValueError):
    pass


def _samples(s) -> np.ndarray:
    if hasattr(s, "samples"):
        s = s.samples
    if isinstance(s, (list, tuple)) and s and isinstance(s[0], MotionSequence):
        s = np.stack([m.frames for m in s])
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise MetricError(f"samples must be (K, N, D), got {arr.shape}")
    return arr


def _gt(y) -> np.ndarray:
    return y.frames if isinstance(y, MotionSequence) else np.asarray(y, dtype=np.float64)


def diversity(samples) -> float:
    """Mean l2 distance over unordered pairs of flattened sequences."""
    s = _samples(samples)
    k = s.shape[0]
    if k < 2:
        raise MetricError("diversity needs at least two samples")
    flat = s.reshape(k, -1)
    iu = np.triu_indices(k, 1)
    diffs = flat[iu[0]] - flat[iu[1]]
    return float(np.mean(np.sqrt(np.sum(diffs * diffs, axis=1))))


def _frame_dist(s: np.ndarray, gt: np.ndarray, squared: bool) -> np.ndarray:
    """(K, N) per-frame distances between samples and ground truth."""
    if s.shape[1:] != gt.shape:
        raise MetricError(f"sample shape {s.shape[1:]} does not match ground truth {gt.shape}")
    d2 = np.sum((s - gt[None]) ** 2, axis=-1)
    return d2 if squared else np.sqrt(d2)


def ade(samples, gt, squared: bool = False) -> float:
    s = _samples(samples)
    if s.shape[0] == 0:
        raise MetricError("empty sample set")
    return float(np.min(_frame_dist(s, _gt(gt), squared).mean(axis=1)))


def fde(samples, gt, squared: bool = False) -> float:
    s = _samples(samples)
    if s.shape[0] == 0:
        raise MetricError("empty sample set")
    return float(np.min(_frame_dist(s, _gt(gt), squared)[:, -1]))


def similar_futures(pool, x_gt, eta: float = DEFAULT_ETA) -> list[np.ndarray]:
    """Futures whose condition ends within eta (l2 over the last frame) of x_gt's."""
    if not pool:
        raise MetricError("empty ground-truth pool")
    last = _gt(x_gt)[-1]
    out = [_gt(y) for x, y in pool if np.linalg.norm(_gt(x)[-1] - last) < eta]
    return out


def _multimodal(samples, pool, x_gt, eta, final: bool, squared: bool) -> float:
    s = _samples(samples)
    futures = similar_futures(pool, x_gt, eta)
    if not futures:
        raise MetricError("similarity set is empty; include the ground-truth pair in the pool")
    vals = []
    for y in futures:
        d = _frame_dist(s, y, squared)
        vals.append(np.min(d[:, -1]) if final else np.min(d.mean(axis=1)))
    return float(np.mean(vals))


def mmade(samples, gt_pool, x_gt, eta: float = DEFAULT_ETA, squared: bool = False) -> float:
    return _multimodal(samples, gt_pool, x_gt, eta, False, squared)


def mmfde(samples, gt_pool, x_gt, eta: float = DEFAULT_ETA, squared: bool = False) -> float:
    return _multimodal(samples, gt_pool, x_gt, eta, True, squared)


def spectral_entropy(power) -> float | None:
    """Shannon entropy (nats) of a non-negative spectrum; None if it is all zero."""
    p = np.asarray(power, dtype=np.float64)
    total = p.sum()
    if total <= 0:
        return None
    q = p / total
    nz = q[q > 0]
    return float(-np.sum(nz * np.log(nz)))


def _mean_entropy(seqs: np.ndarray) -> float:
    vals = []
    for seq in seqs:
        spec = dct_forward(seq)[1:] ** 2          # drop the DC band
        for c in range(spec.shape[1]):
            h = spectral_entropy(spec[:, c])
            if h is not None:
                vals.append(h)
    return float(np.mean(vals)) if vals else 0.0


def fse(samples, gt) -> float:
    """Average spectral entropy of the samples minus that of the ground truth."""
    s = _samples(samples)
    g = _gt(gt)
    if s.shape[1] < 2:
        raise MetricError("spectral entropy needs at least two frames")
    return _mean_entropy(s) - _mean_entropy(g[None])


def foot_skate_ratio(seq, layout: MarkerLayout | str | None = None, frame_rate: float | None = None) -> float:
    """Fraction of frame transitions where both heels are low and both move fast."""
    if isinstance(seq, MotionSequence):
        frames, rate = seq.frames, seq.frame_rate
        layout = layout or seq.layout
    else:
        frames, rate = np.asarray(seq, dtype=np.float64), frame_rate
    if rate is None:
        raise MetricError("frame rate is required")
    layout = load_layout(layout) if isinstance(layout, str) or layout is None else layout
    try:
        idx = layout.indices(HEEL_MARKERS)
    except Exception as exc:
        raise MetricError(str(exc)) from None
    if frames.shape[0] < 2:
        return 0.0
    heels = frames.reshape(frames.shape[0], -1, 3)[:, idx]          # (T, 2, 3)
    speed = np.linalg.norm(np.diff(heels, axis=0), axis=-1) * rate  # (T-1, 2)
    low = heels[1:, :, 2] < SKATE_HEIGHT
    skate = np.all(low, axis=1) & np.all(speed > SKATE_SPEED, axis=1)
    return float(np.mean(skate))


def _pair_std(points: np.ndarray, pairs) -> float:
    """Sum over pairs of the population std (over time) of their distance."""
    total = 0.0
    for i, j in pairs:
        d = np.linalg.norm(points[:, i] - points[:, j], axis=-1)
        total += float(np.std(d))
    return total


def deformation_score(seqs, part, layout: MarkerLayout | str | None = None) -> float:
    """Temporal variation of within-group marker distances, averaged over sequences."""
    if isinstance(part, str):
        if part not in PART_GROUPS:
            raise MetricError(f"unknown part group {part!r}; known: {sorted(PART_GROUPS)}")
        names = PART_GROUPS[part]
    else:
        names = tuple(part)
    arr = _samples(seqs)
    if layout is None and isinstance(seqs, MotionSequence):
        layout = seqs.layout
    layout = load_layout(layout) if isinstance(layout, str) or layout is None else layout
    try:
        idx = layout.indices(names)
    except Exception as exc:
        raise MetricError(str(exc)) from None
    if arr.shape[1] < 2:
        raise MetricError("deformation needs at least two frames")
    pairs = [(a, b) for a in range(len(idx)) for b in range(a + 1, len(idx))]
    scores = []
    for s in arr:
        pts = s.reshape(s.shape[0], -1, 3)[:, idx]
        scores.append(_pair_std(pts, pairs))
    return float(np.mean(scores))


def bone_deformation(joint_seqs, bones=LIMB_BONES, skel=None) -> float:
    """Same statistic on joint pairs; joint_seqs is (T, J, 3) or (S, T, J, 3)."""
    skel = skel or load_skeleton()
    arr = np.asarray(joint_seqs, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    try:
        pairs = [(skel.index(a), skel.index(b)) for a, b in bones]
    except Exception as exc:
        raise MetricError(str(exc)) from None
    return float(np.mean([_pair_std(s, pairs) for s in arr]))


@dataclass
class MetricsReport:
    diversity: float = 0.0
    ade: float = 0.0
    fde: float = 0.0
    mmade: float = 0.0
    mmfde: float = 0.0
    fse: float = 0.0
    foot_skate_ratio: float = 0.0
    deformation: dict = field(default_factory=dict)   # part -> meters
    bdf: float | None = None
    meta: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {k: getattr(self, k) for k in ("diversity", "ade", "fde", "mmade", "mmfde", "fse",
                                             "foot_skate_ratio")}
        for part in PART_GROUPS:
            row[f"deformation_{part}"] = self.deformation.get(part)
        row["bdf"] = self.bdf
        return row

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        row = self.flat()
        w = csv.DictWriter(buf, fieldnames=list(row))
        w.writeheader()
        w.writerow(row)
        return buf.getvalue()

    def save(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        js, cs = stem.with_suffix(".json"), stem.with_suffix(".csv")
        js.write_text(self.to_json())
        cs.write_text(self.to_csv())
        return js, cs


def evaluate(conditions, futures, sample_sets, layout: MarkerLayout | str, frame_rate: float = 15.0,
             eta: float = DEFAULT_ETA, squared: bool = False, joints=None) -> MetricsReport:
    """Average every metric over test sequences.

    ``conditions``/``futures`` are (S, M, D)/(S, N, D) arrays; ``sample_sets``
    is (S, K, N, D).  ``joints`` optionally holds (S, K, N, J, 3) body joints
    of the samples for the bone metric.
    """
    X = np.asarray(conditions, dtype=np.float64)
    Y = np.asarray(futures, dtype=np.float64)
    S = np.asarray([_samples(s) for s in sample_sets])
    layout = load_layout(layout) if isinstance(layout, str) else layout
    pool = list(zip(X, Y))
    rows = {k: [] for k in ("diversity", "ade", "fde", "mmade", "mmfde", "fse", "skate")}
    parts = {p: [] for p in PART_GROUPS}
    for i in range(len(X)):
        s = S[i]
        rows["diversity"].append(diversity(s) if len(s) > 1 else 0.0)
        rows["ade"].append(ade(s, Y[i], squared))
        rows["fde"].append(fde(s, Y[i], squared))
        rows["mmade"].append(mmade(s, pool, X[i], eta, squared))
        rows["mmfde"].append(mmfde(s, pool, X[i], eta, squared))
        rows["fse"].append(fse(s, Y[i]))
        rows["skate"].append(np.mean([foot_skate_ratio(seq, layout, frame_rate) for seq in s]))
        for p, names in PART_GROUPS.items():
            if all(n in layout.names for n in names):
                parts[p].append(deformation_score(s, p, layout))
    bdf = None
    if joints is not None:
        j = np.asarray(joints, dtype=np.float64)
        bdf = float(np.mean([bone_deformation(js) for js in j]))
    return MetricsReport(
        diversity=float(np.mean(rows["diversity"])), ade=float(np.mean(rows["ade"])),
        fde=float(np.mean(rows["fde"])), mmade=float(np.mean(rows["mmade"])),
        mmfde=float(np.mean(rows["mmfde"])), fse=float(np.mean(rows["fse"])),
        foot_skate_ratio=float(np.mean(rows["skate"])),
        deformation={p: float(np.mean(v)) for p, v in parts.items() if v},
        bdf=bdf, meta={"eta": eta, "squared_distance": squared, "n_sequences": len(X),
                       "K": int(S.shape[1])},
    )
