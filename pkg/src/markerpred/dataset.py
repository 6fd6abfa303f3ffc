"""Synthetic motion, world-frame canonicalization and on-disk storage.

Raw clips are rendered at 120 Hz from smooth body-parameter trajectories.
Canonical clips are 480-frame windows decimated to 15 Hz (60 frames) and
re-expressed in a frame anchored at the body in the first frame: +X from
left hip to right hip (horizontal), +Z up, +Y forward, origin below the
root on the ground plane.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import (BodyParams, IDENTITY_R6, N_HAND, N_PARAMS, N_THETA, PARAM_SLICES,
                   forward_kinematics, load_layout, load_skeleton, markers_from_body,
                   matrix_to_rot6d, rot6d_to_matrix)
from .motion import MotionError, MotionSequence, split_condition_future

log = logging.getLogger(__name__)

RAW_RATE = 120.0
WINDOW = 480
DECIMATE = 8
N_CONDITION = 15
N_FUTURE = 45
HEEL_CLEARANCE = 0.02
FAMILIES = ("walk", "circle", "wave", "swing")

MAGIC = b"MKSQ"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset file or manifest."""


# -- synthesis ---------------------------------------------------------------------

@dataclass
class SynthSpec:
    family: str = "walk"
    speed_range: tuple = (0.6, 1.4)       # m/s
    amplitude_range: tuple = (0.5, 1.0)   # limb-motion scale, 0 freezes the pose
    duration: float = 8.0                 # seconds at 120 Hz
    seed: int = 0
    beta: tuple | None = None             # None draws a body from the seed
    layout: str = "cmu41"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown motion family {self.family!r}; pick one of {FAMILIES}")
        if self.duration < WINDOW / RAW_RATE:
            raise ValueError(f"duration must be >= {WINDOW / RAW_RATE} s")


def _smooth_steps(rng, n, lo, hi, mean_gap, fr, blend=0.5):
    """Piecewise-constant random levels with smoothstep transitions."""
    t = np.arange(n) / fr
    value = np.full(n, rng.uniform(lo, hi))
    tau = rng.exponential(mean_gap)
    while tau < t[-1]:
        new = rng.uniform(lo, hi)
        s = np.clip((t - tau) / blend, 0.0, 1.0)
        s = s * s * (3 - 2 * s)
        value = value * (1 - s) + new * s
        tau += rng.exponential(mean_gap)
    return value


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _yaw_r6(psi):
    c, s = np.cos(psi), np.sin(psi)
    z = np.zeros_like(psi)
    return np.stack([c, s, z, -s, c, z], axis=-1)


def _base_pose(n):
    return np.zeros((n, N_THETA))   # the zero pose already stands with arms down


def _gait(rng, spec, n, fr, amp, turning, leg=0.86):
    t = np.arange(n) / fr
    v = _smooth_steps(rng, n, *spec.speed_range, mean_gap=2.0, fr=fr)
    cadence = 0.6 + 0.25 * v
    hip_amp = np.arcsin(np.clip(v / (4 * leg * cadence), 0.0, 0.6))
    phase = 2 * np.pi * np.cumsum(cadence) / fr + rng.uniform(0, 2 * np.pi)
    s, c = np.sin(phase), np.cos(phase)
    knee = np.minimum(3.0 * hip_amp, 1.2)
    theta = _base_pose(n)
    theta[:, 5] = hip_amp * s
    theta[:, 8] = -hip_amp * s
    theta[:, 11] = -knee * np.maximum(0.0, c) ** 1.5
    theta[:, 12] = -knee * np.maximum(0.0, -c) ** 1.5
    # keep both feet parallel to the ground so the landing heel meets the stance height
    theta[:, 13] = -(theta[:, 5] + theta[:, 11])
    theta[:, 14] = -(theta[:, 8] + theta[:, 12])
    arm = amp * (0.2 + 1.2 * hip_amp)
    theta[:, 21] = -arm * s
    theta[:, 22] = arm * s
    theta[:, 2] = 0.08 * amp * s
    theta[:, 0] = 0.05 * amp * hip_amp * np.cos(2 * phase)
    if turning:
        radius = rng.uniform(1.5, 4.0) * rng.choice([-1.0, 1.0])
        omega = _smooth_steps(rng, n, 0.7, 1.3, mean_gap=2.5, fr=fr) * v / radius
    else:
        omega = np.zeros(n)
    yaw = rng.uniform(-np.pi, np.pi) + np.cumsum(omega) / fr
    stance = (c > 0).astype(int)          # the left leg swings while cos(phase) > 0
    return theta, yaw, stance


def _wave(rng, spec, n, fr, amp):
    t = np.arange(n) / fr
    theta = _base_pose(n)
    side = rng.integers(2)
    onset = rng.uniform(0.0, t[-1])
    hold = rng.uniform(1.0, 3.0)
    up = _smoothstep((t - onset) / 0.6) * (1 - _smoothstep((t - onset - hold) / 0.6))
    freq = rng.uniform(1.0, 2.5)
    osc = np.sin(2 * np.pi * freq * (t - onset))
    sign = -1.0 if side == 0 else 1.0      # left limbs use mirrored signs
    abd, flex, twist = (19, 25, 23) if side == 0 else (20, 26, 24)
    theta[:, abd] += -sign * amp * 2.2 * up
    theta[:, flex] += sign * amp * up * (0.9 + 0.4 * osc)
    theta[:, twist] += amp * up * 0.4 * osc
    theta[:, 1] = 0.05 * amp * np.sin(2 * np.pi * 0.3 * t + rng.uniform(0, 6.3))
    theta[:, 3] = 0.1 * amp * up
    return theta, np.full(n, rng.uniform(-np.pi, np.pi)), t


def _swing(rng, spec, n, fr, amp):
    t = np.arange(n) / fr
    theta = _base_pose(n)
    period = rng.uniform(1.5, 2.5)
    start = rng.uniform(-period, 0.0)
    cycle = (t - start) / period
    k = np.floor(cycle).astype(int)
    u = cycle - k
    throw_amp = amp * rng.uniform(0.4, 1.0, size=k.max() + 2)[k + 1]
    cock = _smoothstep(u / 0.55) * (1 - _smoothstep((u - 0.55) / 0.15))
    follow = _smoothstep((u - 0.55) / 0.15) * (1 - _smoothstep((u - 0.75) / 0.25))
    theta[:, 20] += -throw_amp * 1.8 * cock
    theta[:, 22] += throw_amp * (-0.8 * cock + 1.0 * follow)
    theta[:, 26] += throw_amp * (1.2 * cock + 0.2 * follow)
    theta[:, 2] = throw_amp * (-0.35 * cock + 0.3 * follow)
    theta[:, 1] = throw_amp * 0.08 * (cock - follow)
    theta[:, 19] += throw_amp * 0.3 * follow
    return theta, np.full(n, rng.uniform(-np.pi, np.pi)), t


def synth_generate(spec: SynthSpec) -> MotionSequence:
    """Render one raw 120 Hz clip of the requested motion family."""
    skel = load_skeleton()
    rng = np.random.default_rng(spec.seed)
    fr = RAW_RATE
    n = int(round(spec.duration * fr))
    amp = rng.uniform(*spec.amplitude_range)
    beta = (np.asarray(spec.beta, dtype=np.float64) if spec.beta is not None
            else rng.normal(0.0, 0.6, size=10))
    walking = spec.family in ("walk", "circle")
    cmu = load_layout("cmu41")
    heel_idx = cmu.indices(["LHEE", "RHEE"])
    if walking:
        rest = np.zeros(N_PARAMS)
        rest[PARAM_SLICES["r6"]] = IDENTITY_R6
        rest[PARAM_SLICES["beta"]] = beta
        rest_joints = forward_kinematics(skel, rest)
        leg = rest_joints[skel.index("left_hip"), 2] - rest_joints[skel.index("left_ankle"), 2]
        theta, yaw, stance = _gait(rng, spec, n, fr, amp, turning=spec.family == "circle", leg=leg)
    elif spec.family == "wave":
        theta, yaw, _ = _wave(rng, spec, n, fr, amp)
    else:
        theta, yaw, _ = _swing(rng, spec, n, fr, amp)
    theta_h = np.zeros((n, N_HAND))
    theta_h += amp * 0.3 * np.sin(np.arange(n)[:, None] / fr * rng.uniform(0.2, 0.8, N_HAND)
                                  + rng.uniform(0, 6.3, N_HAND))

    # heels in the body frame (no translation, identity orientation)
    local = np.zeros((n, N_PARAMS))
    local[:, PARAM_SLICES["r6"]] = IDENTITY_R6
    local[:, PARAM_SLICES["beta"]] = beta
    local[:, PARAM_SLICES["theta"]] = theta
    local[:, PARAM_SLICES["theta_h"]] = theta_h
    heels = markers_from_body(local, skel, cmu).reshape(n, -1, 3)[:, heel_idx]   # (n, 2, 3)

    trans = np.zeros((n, 3))
    start = rng.uniform(-1.0, 1.0, size=2)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rot_xy = lambda i, v: np.array([cy[i] * v[0] - sy[i] * v[1], sy[i] * v[0] + cy[i] * v[1]])
    if walking:
        plant = start + rot_xy(0, heels[0, stance[0], :2])
        for i in range(n):
            if i > 0 and stance[i] != stance[i - 1]:
                plant = trans[i - 1, :2] + rot_xy(i - 1, heels[i - 1, stance[i], :2])
            trans[i, :2] = plant - rot_xy(i, heels[i, stance[i], :2])
            trans[i, 2] = HEEL_CLEARANCE - heels[i, stance[i], 2]
    else:
        trans[:, :2] = start
        trans[:, 2] = HEEL_CLEARANCE - heels[:, :, 2].min(axis=1)

    body = local.copy()
    body[:, PARAM_SLICES["t"]] = trans
    body[:, PARAM_SLICES["r6"]] = _yaw_r6(yaw)
    layout = load_layout(spec.layout)
    frames = markers_from_body(body, skel, layout)
    joints = forward_kinematics(skel, body)
    meta = {"source": "synthetic", "spec": _spec_dict(spec), "skeleton": skel.name}
    return MotionSequence(frames, fr, layout.name, joints=joints, body=body, meta=meta)


def _spec_dict(spec: SynthSpec) -> dict:
    d = asdict(spec)
    d["speed_range"] = list(spec.speed_range)
    d["amplitude_range"] = list(spec.amplitude_range)
    d["beta"] = None if spec.beta is None else list(spec.beta)
    return d


# -- canonicalization -----------------------------------------------------------

def world_reset(seq: MotionSequence) -> MotionSequence:
    """Re-express a clip in the frame anchored at its first-frame body."""
    if seq.joints is None:
        raise MotionError("canonicalization needs the joint track (root and hips)")
    skel = load_skeleton(seq.meta.get("skeleton", "simple24"))
    root = seq.joints[0, skel.index("pelvis")]
    across = seq.joints[0, skel.index("right_hip")] - seq.joints[0, skel.index("left_hip")]
    across = np.array([across[0], across[1], 0.0])
    norm = np.linalg.norm(across)
    if norm < 1e-9:
        raise MotionError("hips coincide in the horizontal plane; cannot orient the clip")
    x_axis = across / norm
    z_axis = np.array([0.0, 0.0, 1.0])
    y_axis = np.cross(z_axis, x_axis)
    rot = np.stack([x_axis, y_axis, z_axis])          # rows: new axes in old coordinates
    origin = np.array([root[0], root[1], 0.0])

    def move(points):
        return (points - origin) @ rot.T

    n = seq.n_frames
    frames = move(seq.points()).reshape(n, -1)
    joints = move(seq.joints)
    body = None
    if seq.body is not None:
        body = seq.body.copy()
        body[:, PARAM_SLICES["t"]] = move(seq.body[:, PARAM_SLICES["t"]])
        root_rot = rot6d_to_matrix(seq.body[:, PARAM_SLICES["r6"]])
        body[:, PARAM_SLICES["r6"]] = matrix_to_rot6d(rot[None] @ root_rot)
    meta = dict(seq.meta)
    return MotionSequence(frames, seq.frame_rate, seq.layout, joints=joints, body=body, meta=meta)


def canonical_clips(raw: MotionSequence, window: int = WINDOW, step: int = DECIMATE) -> list[MotionSequence]:
    """Non-overlapping windows, decimated and reset to the first-frame body frame."""
    if raw.n_frames < window:
        log.warning("skipping clip with %d frames (< %d)", raw.n_frames, window)
        return []
    clips = []
    for k in range(raw.n_frames // window):
        piece = raw.slice(k * window, (k + 1) * window, step)
        piece.meta["window"] = k
        clips.append(world_reset(piece))
    return clips


def canonicalize(raw: MotionSequence, n_condition: int = N_CONDITION) -> list[tuple[MotionSequence, MotionSequence]]:
    """Condition/future pairs (15 + 45 frames at 15 Hz) from a 120 Hz recording."""
    return [split_condition_future(c, n_condition) for c in canonical_clips(raw)]


def make_toy_clips(n_clips: int, layout: str = "cmu41", seed: int = 0,
                   families=FAMILIES, duration: float = 8.0,
                   speed_range=(0.6, 1.4), amplitude_range=(0.5, 1.0)) -> list[MotionSequence]:
    """Generate raw clips round-robin over families until n_clips canonical clips exist."""
    clips: list[MotionSequence] = []
    i = 0
    while len(clips) < n_clips:
        spec = SynthSpec(family=families[i % len(families)], seed=seed * 100003 + i,
                         duration=duration, layout=layout, speed_range=tuple(speed_range),
                         amplitude_range=tuple(amplitude_range))
        for clip in canonical_clips(synth_generate(spec)):
            clip.meta["raw_index"] = i
            clips.append(clip)
        i += 1
    return clips[:n_clips]


# -- storage --------------------------------------------------------------------------

def write_sequence(path, seq: MotionSequence) -> None:
    """Binary container: magic, u16 version, u32 header length, JSON header, float64 blocks."""
    header = {
        "layout": seq.layout,
        "frame_rate": seq.frame_rate,
        "n_frames": seq.n_frames,
        "width": seq.frames.shape[1],
        "joints": None if seq.joints is None else list(seq.joints.shape[1:]),
        "body": None if seq.body is None else seq.body.shape[1],
        "meta": seq.meta,
    }
    raw_header = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(raw_header)))
        fh.write(raw_header)
        fh.write(np.ascontiguousarray(seq.frames, dtype="<f8").tobytes())
        if seq.joints is not None:
            fh.write(np.ascontiguousarray(seq.joints, dtype="<f8").tobytes())
        if seq.body is not None:
            fh.write(np.ascontiguousarray(seq.body, dtype="<f8").tobytes())


def read_sequence(path) -> MotionSequence:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic at offset 0")
    if len(blob) < 10:
        raise DatasetError(f"{path}: truncated header at offset 4")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported version {version} at offset 4")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{path}: unreadable header at offset 10 ({exc})") from None
    pos = 10 + hlen

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(blob):
            raise DatasetError(f"{path}: data block truncated at offset {len(blob)} (expected {end})")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
        return arr

    n = header["n_frames"]
    frames = take((n, header["width"]))
    joints = take((n, *header["joints"])) if header.get("joints") else None
    body = take((n, header["body"])) if header.get("body") else None
    if pos != len(blob):
        raise DatasetError(f"{path}: {len(blob) - pos} trailing bytes at offset {pos}")
    return MotionSequence(frames, header["frame_rate"], header["layout"], joints=joints, body=body,
                          meta=header.get("meta", {}))


def write_sequence_csv(path, seq: MotionSequence) -> None:
    with open(path, "w") as fh:
        fh.write(f"# layout={seq.layout} frame_rate={seq.frame_rate!r}\n")
        np.savetxt(fh, seq.frames, delimiter=",", fmt="%.17g")


def read_sequence_csv(path) -> MotionSequence:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DatasetError(f"{path}: missing '# layout=... frame_rate=...' header at line 1")
    fields = dict(tok.split("=", 1) for tok in lines[0][1:].split())
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            rows.append([float(x) for x in line.split(",")])
        except ValueError:
            raise DatasetError(f"{path}: bad number at line {i}") from None
    return MotionSequence(np.array(rows), float(fields["frame_rate"]), fields["layout"])


@dataclass
class SequenceRecord:
    id: str
    file: str
    frames: int
    frame_rate: float
    layout: str
    split: str = "train"
    source: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    sequences: list[SequenceRecord]
    root: Path = Path(".")

    def ids(self) -> list[str]:
        return [r.id for r in self.sequences]

    def select(self, split: str) -> list[SequenceRecord]:
        return [r for r in self.sequences if r.split == split]


def save_dataset(directory, clips: list[MotionSequence], splits: list[str] | None = None,
                 fmt: str = "bin") -> Path:
    """Write clips plus manifest.json into ``directory``; returns the manifest path."""
    directory = Path(directory)
    (directory / "sequences").mkdir(parents=True, exist_ok=True)
    splits = splits or ["train"] * len(clips)
    records = []
    for i, (clip, split) in enumerate(zip(clips, splits)):
        sid = f"seq{i:05d}"
        rel = f"sequences/{sid}.{'mksq' if fmt == 'bin' else 'csv'}"
        if fmt == "bin":
            write_sequence(directory / rel, clip)
        else:
            write_sequence_csv(directory / rel, clip)
        records.append(SequenceRecord(sid, rel, clip.n_frames, clip.frame_rate, clip.layout, split,
                                      clip.meta.get("spec", {})))
    manifest = {"format": "markerpred.manifest", "version": 1,
                "sequences": [asdict(r) for r in records]}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: malformed manifest at offset {exc.pos}") from None
    records = [SequenceRecord(**r) for r in doc.get("sequences", [])]
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate sequence ids")
    return DatasetManifest(records, path.parent)


def load_dataset(path, split: str | None = None) -> tuple[DatasetManifest, list[MotionSequence]]:
    manifest = load_manifest(path)
    seqs = []
    for rec in manifest.sequences:
        if split is not None and rec.split != split:
            continue
        f = manifest.root / rec.file
        if not f.exists():
            raise DatasetError(f"sequence {rec.id!r}: referenced file {rec.file!r} is missing")
        seq = read_sequence(f) if f.suffix == ".mksq" else read_sequence_csv(f)
        seq.meta["id"] = rec.id
        seqs.append(seq)
    return manifest, seqs


def pairs_from_clips(clips, n_condition: int = N_CONDITION):
    return [split_condition_future(c, n_condition) for c in clips]
