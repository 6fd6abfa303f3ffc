"""Simplified differentiable parametric body.

A 24-joint skeleton (22 body joints plus two hand joints) driven by the
same parameter roles as a full body model: translation, a 6-value global
orientation, 10 shape coefficients that rescale bone lengths, 32 body-pose
coefficients and 24 hand-pose coefficients.  Pose coefficients reach the
per-joint XYZ Euler angles through fixed linear maps.  Markers are rigid
offsets in the frame of a single parent joint.

Coordinates: +Z up, +Y forward, +X from the left hip towards the right hip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

N_BETA = 10
N_THETA = 32
N_HAND = 24
N_PARAMS = 3 + 6 + N_BETA + N_THETA + N_HAND

PARAM_SLICES = {
    "t": slice(0, 3),
    "r6": slice(3, 9),
    "beta": slice(9, 19),
    "theta": slice(19, 51),
    "theta_h": slice(51, 75),
}

IDENTITY_R6 = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class BodyModelError(ValueError):
    """Inconsistent skeleton, layout or parameters."""


@dataclass
class BodyParams:
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r6: np.ndarray = field(default_factory=lambda: IDENTITY_R6.copy())
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_BETA))
    theta: np.ndarray = field(default_factory=lambda: np.zeros(N_THETA))
    theta_h: np.ndarray = field(default_factory=lambda: np.zeros(N_HAND))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.r6, self.beta, self.theta, self.theta_h]).astype(np.float64)

    @classmethod
    def from_vector(cls, v) -> "BodyParams":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (N_PARAMS,):
            raise BodyModelError(f"expected {N_PARAMS} body parameters, got {v.shape}")
        return cls(*(v[s].copy() for s in PARAM_SLICES.values()))

    def copy(self) -> "BodyParams":
        return BodyParams.from_vector(self.to_vector())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in PARAM_SLICES}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyParams":
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in PARAM_SLICES})


@dataclass(frozen=True)
class SkeletonDef:
    name: str
    joint_names: tuple
    parents: np.ndarray          # (J,), -1 for the root
    offsets: np.ndarray          # (J, 3) rest offsets in the parent frame
    shape_blend: np.ndarray      # (J, 10) relative bone-length change per beta
    angle_basis: np.ndarray      # (3*(J-1), 32 + 24) pose coeffs -> Euler angles
    rest_root_height: float
    rest_angles: np.ndarray      # (3*(J-1),) Euler angles of the zero pose

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise BodyModelError(f"unknown joint {name!r}") from None

    @classmethod
    def from_document(cls, doc: dict) -> "SkeletonDef":
        joints = doc["joints"]
        names = tuple(j["name"] for j in joints)
        index = {n: i for i, n in enumerate(names)}
        parents = np.array([j["parent"] for j in joints], dtype=int)
        if parents[0] != -1:
            raise BodyModelError("joint 0 must be the root")
        if any(p >= i or p < 0 for i, p in enumerate(parents) if i > 0):
            raise BodyModelError("joints must be in topological order")
        offsets = np.array([j["offset"] for j in joints], dtype=np.float64)
        blend = np.array(doc["shape_blend"], dtype=np.float64)
        n = len(names)
        basis = np.zeros((3 * (n - 1), N_THETA + N_HAND))
        for e in doc["body_pose_basis"]:
            row = 3 * (index[e["joint"]] - 1) + int(e["axis"])
            basis[row, int(e["coeff"])] += float(e["weight"])
        hand = np.array(doc["hand_pose_basis"], dtype=np.float64)
        for h, jname in enumerate(doc["hand_joints"]):
            r0 = 3 * (index[jname] - 1)
            basis[r0:r0 + 3, N_THETA:] += hand[3 * h:3 * h + 3]
        rest = np.zeros(3 * (n - 1))
        for e in doc.get("rest_angles", []):
            rest[3 * (index[e["joint"]] - 1) + int(e["axis"])] = float(e["value"])
        return cls(doc["name"], names, parents, offsets, blend, basis,
                   float(doc.get("rest_root_height", 0.0)), rest)

    def to_document(self) -> dict:
        return {
            "name": self.name,
            "joints": [{"name": n, "parent": int(p), "offset": o.tolist()}
                       for n, p, o in zip(self.joint_names, self.parents, self.offsets)],
            "shape_blend": self.shape_blend.tolist(),
            "angle_basis": self.angle_basis.tolist(),
            "rest_root_height": self.rest_root_height,
            "rest_angles": self.rest_angles.tolist(),
        }


@dataclass(frozen=True)
class MarkerLayout:
    name: str
    names: tuple
    parents: np.ndarray   # joint index per marker
    offsets: np.ndarray   # (V, 3) in the parent joint frame

    @property
    def n_markers(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise BodyModelError(f"layout {self.name!r} has no marker {name!r}") from None

    def indices(self, names) -> list[int]:
        return [self.index(n) for n in names]

    @classmethod
    def from_document(cls, doc: dict, skel: SkeletonDef) -> "MarkerLayout":
        names = tuple(m["name"] for m in doc["markers"])
        if len(set(names)) != len(names):
            raise BodyModelError(f"duplicate marker names in layout {doc['name']!r}")
        parents = []
        for m in doc["markers"]:
            if m["parent"] not in skel.joint_names:
                raise BodyModelError(f"marker {m['name']!r} references unknown joint {m['parent']!r}")
            parents.append(skel.joint_names.index(m["parent"]))
        offsets = np.array([m["offset"] for m in doc["markers"]], dtype=np.float64)
        return cls(doc["name"], names, np.array(parents, dtype=int), offsets)


def _read_data(filename: str) -> dict:
    return json.loads(resources.files("markerpred").joinpath("data").joinpath(filename).read_text())


@lru_cache(maxsize=None)
def load_skeleton(name: str = "simple24") -> SkeletonDef:
    return SkeletonDef.from_document(_read_data(f"skeleton_{name}.json"))


@lru_cache(maxsize=None)
def load_layout(name: str = "cmu41") -> MarkerLayout:
    if Path(name).suffix == ".json":
        doc = json.loads(Path(name).read_text())
    else:
        try:
            doc = _read_data(f"layout_{name}.json")
        except FileNotFoundError:
            raise BodyModelError(f"unknown marker layout {name!r}") from None
    return MarkerLayout.from_document(doc, load_skeleton(doc.get("skeleton", "simple24")))


# -- rotations -----------------------------------------------------------------

def _normalize_with_jac(v):
    n = np.linalg.norm(v)
    u = v / n
    return u, (np.eye(3) - np.outer(u, u)) / n


def rot6d_to_matrix(r6) -> np.ndarray:
    """Gram-Schmidt the two stored columns; third column is their cross product."""
    r6 = np.asarray(r6, dtype=np.float64)
    if r6.shape[-1] != 6:
        raise BodyModelError("rotation needs 6 values")
    a1, a2 = r6[..., :3], r6[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 < 1e-8):
        raise BodyModelError("degenerate 6D rotation: first column vanishes")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 < 1e-8):
        raise BodyModelError("degenerate 6D rotation: columns are parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def rot6d_jacobian(r6) -> np.ndarray:
    """dR/dr6 for a single rotation, shape (6, 3, 3)."""
    r6 = np.asarray(r6, dtype=np.float64)
    a1, a2 = r6[:3], r6[3:]
    b1, jb1 = _normalize_with_jac(a1)
    u2 = a2 - (b1 @ a2) * b1
    b2, jn2 = _normalize_with_jac(u2)
    out = np.zeros((6, 3, 3))
    for k in range(6):
        da1 = np.zeros(3)
        da2 = np.zeros(3)
        if k < 3:
            da1[k] = 1.0
        else:
            da2[k - 3] = 1.0
        db1 = jb1 @ da1
        du2 = da2 - (db1 @ a2 + b1 @ da2) * b1 - (b1 @ a2) * db1
        db2 = jn2 @ du2
        db3 = np.cross(db1, b2) + np.cross(b1, db2)
        out[k] = np.stack([db1, db2, db3], axis=-1)
    return out


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


# -- kinematics ----------------------------------------------------------------

@dataclass
class _Pose:
    positions: np.ndarray   # (B, J, 3)
    rotations: np.ndarray   # (B, J, 3, 3) world orientation of each joint frame
    partial: list           # per joint: (Rx, Rx@Ry) in the parent frame, (B, 3, 3) each
    offsets: np.ndarray     # (B, J, 3) shape-adjusted rest offsets


def _as_batch(vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if v.shape[-1] != N_PARAMS:
        raise BodyModelError(f"expected trailing dim {N_PARAMS}, got {v.shape}")
    return v.reshape(-1, N_PARAMS)


def _pose(skel: SkeletonDef, vec) -> _Pose:
    v = _as_batch(vec)
    b = v.shape[0]
    t = v[:, PARAM_SLICES["t"]]
    root = rot6d_to_matrix(v[:, PARAM_SLICES["r6"]])
    beta = v[:, PARAM_SLICES["beta"]]
    coeffs = v[:, 19:]
    angles = (coeffs @ skel.angle_basis.T + skel.rest_angles).reshape(b, skel.n_joints - 1, 3)
    scale = 1.0 + beta @ skel.shape_blend.T                       # (B, J)
    offsets = skel.offsets[None] * scale[..., None]
    n = skel.n_joints
    pos = np.zeros((b, n, 3))
    rot = np.zeros((b, n, 3, 3))
    pos[:, 0] = t
    rot[:, 0] = root
    partial = [None] * n
    for j in range(1, n):
        p = skel.parents[j]
        a = angles[:, j - 1]
        rx = _rx(a[:, 0])
        rxy = rx @ _ry(a[:, 1])
        local = rxy @ _rz(a[:, 2])
        pos[:, j] = pos[:, p] + np.einsum("bij,bj->bi", rot[:, p], offsets[:, j])
        rot[:, j] = rot[:, p] @ local
        partial[j] = (rx, rxy)
    return _Pose(pos, rot, partial, offsets)


def forward_kinematics(skel: SkeletonDef, params) -> np.ndarray:
    """Joint positions (J, 3), or (..., J, 3) for batched parameter vectors."""
    vec = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=np.float64)
    pose = _pose(skel, vec)
    return pose.positions.reshape(vec.shape[:-1] + (skel.n_joints, 3))


def markers_from_body(params, skel: SkeletonDef, layout: MarkerLayout) -> np.ndarray:
    """Marker frame as a flat (3V,) vector (or (..., 3V) when batched)."""
    vec = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=np.float64)
    if layout.parents.max() >= skel.n_joints:
        raise BodyModelError(f"layout {layout.name!r} does not fit skeleton {skel.name!r}")
    pose = _pose(skel, vec)
    m = pose.positions[:, layout.parents] + np.einsum(
        "bvij,vj->bvi", pose.rotations[:, layout.parents], layout.offsets)
    return m.reshape(vec.shape[:-1] + (3 * layout.n_markers,))


@lru_cache(maxsize=16)
def _ancestry(skel_name: str, parents: tuple) -> np.ndarray:
    n = len(parents)
    anc = np.zeros((n, n), dtype=bool)   # anc[i, j]: j is i or an ancestor of i
    for i in range(n):
        j = i
        while j >= 0:
            anc[i, j] = True
            j = parents[j]
    return anc


def point_jacobian(skel: SkeletonDef, params, parents, offsets) -> tuple[np.ndarray, np.ndarray]:
    """Positions and d(position)/d(params) for points rigidly attached to joints.

    Returns (P, J) with P of shape (n, 3) and J of shape (3n, 75), rows
    ordered point-major.
    """
    vec = params.to_vector() if isinstance(params, BodyParams) else np.asarray(params, dtype=np.float64)
    pose = _pose(skel, vec)
    pos, rot = pose.positions[0], pose.rotations[0]
    parents = np.asarray(parents, dtype=int)
    pts = pos[parents] + np.einsum("nij,nj->ni", rot[parents], offsets)
    n = len(parents)
    anc = _ancestry(skel.name, tuple(int(p) for p in skel.parents))[parents]   # (n, J)
    jac = np.zeros((n, 3, N_PARAMS))
    jac[:, :, 0:3] = np.eye(3)
    t = vec[0:3]
    root = rot[0]
    dR = rot6d_jacobian(vec[3:9])                          # (6, 3, 3)
    local = (pts - t) @ root                               # root^T (p - t)
    jac[:, :, 3:9] = np.einsum("kij,nj->nik", dR, local)
    # angles of joints 1..J-1
    n_ang = 3 * (skel.n_joints - 1)
    jang = np.zeros((n, 3, n_ang))
    jbeta = np.zeros((n, 3, N_BETA))
    for j in range(1, skel.n_joints):
        rows = anc[:, j]
        if not rows.any():
            continue
        p = skel.parents[j]
        rx, rxy = pose.partial[j][0][0], pose.partial[j][1][0]
        wp = rot[p]
        axes = (wp[:, 0], wp @ rx[:, 1], wp @ rxy[:, 2])
        lever = pts[rows] - pos[j]
        for k, ax in enumerate(axes):
            jang[rows, :, 3 * (j - 1) + k] = np.cross(ax, lever)
        # bone length change shifts this joint and everything below it
        dirv = wp @ skel.offsets[j]                        # world direction of the rest bone
        jbeta[rows] += dirv[None, :, None] * skel.shape_blend[j][None, None, :]
    jac[:, :, 9:19] = jbeta
    jac[:, :, 19:] = jang @ skel.angle_basis
    return pts, jac.reshape(3 * n, N_PARAMS)


def marker_jacobian(params, skel: SkeletonDef, layout: MarkerLayout) -> tuple[np.ndarray, np.ndarray]:
    """Flat marker vector (3V,) and its Jacobian (3V, 75)."""
    pts, jac = point_jacobian(skel, params, layout.parents, layout.offsets)
    return pts.reshape(-1), jac


def joint_jacobian(params, skel: SkeletonDef) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(skel.n_joints)
    pts, jac = point_jacobian(skel, params, idx, np.zeros((skel.n_joints, 3)))
    return pts, jac


def rest_params(skel: SkeletonDef | None = None) -> BodyParams:
    """Template body standing on the ground plane, facing +Y."""
    skel = skel or load_skeleton()
    p = BodyParams()
    p.t[2] = skel.rest_root_height
    return p
