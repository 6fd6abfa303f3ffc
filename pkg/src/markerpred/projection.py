"""Fit the parametric body to predicted markers and feed the fit back.

Per frame the fit runs three warm-started stages: global translation and
orientation, then body pose, then hand pose, each minimising

    |V(params) - y|^2 + lambda1 |theta|^2 + lambda2 |theta_h|^2

with the body shape held at the value fitted on the condition frames.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .body import (BodyModelError, BodyParams, MarkerLayout, N_PARAMS, SkeletonDef, forward_kinematics, load_layout,
                   load_skeleton, marker_jacobian, markers_from_body, matrix_to_rot6d,
                   rest_params, rot6d_to_matrix)
from .motion import MotionSequence

log = logging.getLogger(__name__)

_T = np.arange(0, 3)
_R = np.arange(3, 9)
_BETA = np.arange(9, 19)
_THETA = np.arange(19, 51)
_HAND = np.arange(51, 75)
STAGES = (np.concatenate([_T, _R]), np.concatenate([_T, _R, _THETA]),
          np.concatenate([_T, _R, _THETA, _HAND]))


class FitError(RuntimeError):
    def __init__(self, msg, stage: int | None = None, frame: int | None = None):
        super().__init__(msg)
        self.stage = stage
        self.frame = frame


@dataclass
class FitConfig:
    lambda1: float = 0.0005
    lambda2: float = 0.01
    caps: tuple = (20, 30, 10)      # iterations per stage; all zero disables projection
    tol: float = 1e-8               # stop a stage once the loss drops by less than this
    optimizer: str = "lm"           # "lm" (damped Gauss-Newton) or "gd"
    shape_iterations: int = 100

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("regulariser weights must be non-negative")
        if len(self.caps) != 3 or any(c < 0 for c in self.caps):
            raise ValueError("caps must be three non-negative iteration counts")
        if self.optimizer not in ("lm", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.caps = tuple(int(c) for c in self.caps)

    @property
    def disabled(self) -> bool:
        return not any(self.caps)


def _vec(p) -> np.ndarray:
    return p.to_vector() if isinstance(p, BodyParams) else np.asarray(p, dtype=np.float64).copy()


def fit_loss(params, y_pred, cfg: FitConfig, skel: SkeletonDef | None = None,
             layout: MarkerLayout | None = None) -> float:
    skel = skel or load_skeleton()
    layout = layout or load_layout()
    v = _vec(params)
    r = markers_from_body(v, skel, layout) - np.asarray(y_pred, dtype=np.float64).reshape(-1)
    return float(r @ r + cfg.lambda1 * v[_THETA] @ v[_THETA] + cfg.lambda2 * v[_HAND] @ v[_HAND])


def fit_loss_grad(params, y_pred, cfg: FitConfig, skel=None, layout=None) -> np.ndarray:
    skel = skel or load_skeleton()
    layout = layout or load_layout()
    v = _vec(params)
    m, jac = marker_jacobian(v, skel, layout)
    g = 2.0 * jac.T @ (m - np.asarray(y_pred, dtype=np.float64).reshape(-1))
    g[_THETA] += 2.0 * cfg.lambda1 * v[_THETA]
    g[_HAND] += 2.0 * cfg.lambda2 * v[_HAND]
    return g


def _residual(v, y, cfg, skel, layout, with_jac=True):
    """Stacked residual [V - y, sqrt(l1) theta, sqrt(l2) theta_h] and its Jacobian."""
    s1, s2 = np.sqrt(cfg.lambda1), np.sqrt(cfg.lambda2)
    if with_jac:
        m, jm = marker_jacobian(v, skel, layout)
    else:
        m, jm = markers_from_body(v, skel, layout), None
    r = np.concatenate([m - y, s1 * v[_THETA], s2 * v[_HAND]])
    if not with_jac:
        return r, None
    jac = np.zeros((r.size, N_PARAMS))
    jac[: m.size] = jm
    jac[m.size + np.arange(32), _THETA] = s1
    jac[m.size + 32 + np.arange(24), _HAND] = s2
    return r, jac


def _run_stage(v, y, active, cap, cfg, skel, layout, stage):
    """Minimise over ``active`` entries; returns (params, accepted-loss history, iterations)."""
    r, jac = _residual(v, y, cfg, skel, layout)
    loss = float(r @ r)
    history = [loss]
    mu = 1e-3          # damping for Gauss-Newton
    lr = 1e-2          # step size for plain gradient descent
    it = 0
    while it < cap:
        it += 1
        ja = jac[:, active]
        if cfg.optimizer == "lm":
            h = ja.T @ ja
            g = ja.T @ r
            step = -np.linalg.solve(h + mu * (np.eye(len(active)) + np.diag(np.diag(h))), g)
        else:
            step = -lr * 2.0 * (ja.T @ r)
        cand = v.copy()
        cand[active] += step
        try:
            r_new, _ = _residual(cand, y, cfg, skel, layout, with_jac=False)
            new = float(r_new @ r_new)
        except BodyModelError:
            new = np.inf          # step collapsed the 6D rotation; treat as a rejected step
            if not np.all(np.isfinite(cand)):
                new = np.nan
        if np.isnan(new):
            raise FitError(f"stage {stage}: loss became non-finite", stage=stage)
        if new < loss:
            drop = loss - new
            v, loss = _normalise_rotation(cand), new
            history.append(loss)
            mu = max(mu / 3.0, 1e-12)
            lr *= 1.5
            if drop < cfg.tol:
                break
            r, jac = _residual(v, y, cfg, skel, layout)
        else:
            mu *= 4.0
            lr /= 4.0
            if mu > 1e12:
                break
    return v, history, it


def _normalise_rotation(v: np.ndarray) -> np.ndarray:
    v = v.copy()
    v[_R] = matrix_to_rot6d(rot6d_to_matrix(v[_R]))
    return v


@dataclass
class FrameFit:
    params: np.ndarray
    iterations: tuple
    losses: list          # accepted-loss history per stage
    final_loss: float


def fit_frame(y_pred, init, beta_fixed, cfg: FitConfig | None = None, skel: SkeletonDef | None = None,
              layout: MarkerLayout | None = None, details: bool = False):
    """Three-stage fit of one marker frame; returns BodyParams (or FrameFit with details).

    With ``beta_fixed=None`` the shape is released in the last stage, so each
    frame gets its own shape (used to read joints off unprojected markers).
    """
    cfg = cfg or FitConfig()
    skel = skel or load_skeleton()
    layout = layout or load_layout()
    y = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if y.size != 3 * layout.n_markers:
        raise ValueError(f"marker frame has {y.size} values, layout {layout.name!r} needs {3 * layout.n_markers}")
    v = _vec(init)
    stages = STAGES
    if beta_fixed is not None:
        v[_BETA] = np.asarray(beta_fixed, dtype=np.float64)
    else:
        stages = STAGES[:2] + (np.concatenate([STAGES[2], _BETA]),)
    losses, iters = [], []
    for stage, (active, cap) in enumerate(zip(stages, cfg.caps), start=1):
        if cap == 0:
            losses.append([])
            iters.append(0)
            continue
        v, hist, it = _run_stage(v, y, active, cap, cfg, skel, layout, stage)
        losses.append(hist)
        iters.append(it)
    v = _normalise_rotation(v)
    final = fit_loss(v, y, cfg, skel, layout)
    if details:
        return FrameFit(v, tuple(iters), losses, final)
    return BodyParams.from_vector(v)


def frame_joints(frames, layout: MarkerLayout | str | None = None, cfg: FitConfig | None = None,
                 skel: SkeletonDef | None = None) -> np.ndarray:
    """(T, J, 3) joints of independent per-frame fits with free shape.

    Nothing ties the frames together, so bone lengths follow whatever the
    markers imply frame by frame; this is the joint track used to score
    bone deformation of unprojected predictions.
    """
    cfg = cfg or FitConfig()
    skel = skel or load_skeleton()
    layout = load_layout(layout) if isinstance(layout, str) or layout is None else layout
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    out = []
    prev = kabsch_init(frames[0], layout, skel)
    for f in frames:
        prev = fit_frame(f, prev, None, cfg, skel, layout, details=True).params
        out.append(forward_kinematics(skel, prev))
    return np.array(out)


def kabsch_init(y, layout: MarkerLayout, skel: SkeletonDef, beta=None) -> np.ndarray:
    """Rest pose rigidly aligned to a marker frame (rotation + translation)."""
    v = rest_params(skel).to_vector()
    if beta is not None:
        v[_BETA] = beta
    ref = markers_from_body(v, skel, layout).reshape(-1, 3)
    obs = np.asarray(y, dtype=np.float64).reshape(-1, 3)
    cr, co = ref.mean(0), obs.mean(0)
    u, _, vt = np.linalg.svd((ref - cr).T @ (obs - co))
    d = np.sign(np.linalg.det(u @ vt))
    rot = (u @ np.diag([1.0, 1.0, d]) @ vt).T
    # rotate the body about its root: new root = co + rot (t0 - cr)
    t0 = v[_T].copy()
    v[_T] = co + rot @ (t0 - cr)
    v[_R] = matrix_to_rot6d(rot)
    return v


def fit_input_sequence(X, cfg: FitConfig | None = None, skel=None, layout=None):
    """Shared body shape and per-frame parameters for condition frames.

    Per-frame fits with zero shape seed a joint damped Gauss-Newton solve
    over the shape and every frame's (t, R, theta, theta_h).  The normal
    equations are block-arrow shaped, so the per-frame blocks are
    eliminated first and only a 10x10 system is solved for the shape.
    """
    cfg = cfg or FitConfig()
    skel = skel or load_skeleton()
    frames = X.frames if isinstance(X, MotionSequence) else np.atleast_2d(np.asarray(X, dtype=np.float64))
    if layout is None:
        layout = load_layout(X.layout) if isinstance(X, MotionSequence) else load_layout()
    n = frames.shape[0]
    if n < 1:
        raise ValueError("need at least one input frame")
    stage_cfg = FitConfig(cfg.lambda1, cfg.lambda2, (20, 30, 10), cfg.tol, cfg.optimizer)
    per = []
    prev = None
    for f in frames:
        # warm start from the previous frame, but fall back to a rigid
        # alignment when the body turned too far for the warm start to hold
        starts = [kabsch_init(f, layout, skel)] + ([prev] if prev is not None else [])
        fits = [fit_frame(f, s0, np.zeros(10), stage_cfg, skel, layout, details=True) for s0 in starts]
        prev = min(fits, key=lambda r: r.final_loss).params
        per.append(prev)
    p = np.array(per)
    free = np.concatenate([_T, _R, _THETA, _HAND])

    def evaluate(p, jac=True):
        out = [_residual(p[i], frames[i], cfg, skel, layout, with_jac=jac) for i in range(n)]
        loss = sum(float(r @ r) for r, _ in out)
        return loss, out

    loss, blocks = evaluate(p)
    mu = 1e-3
    converged = False
    for _ in range(cfg.shape_iterations):
        schur = np.zeros((10, 10))
        rhs = np.zeros(10)
        cache = []
        for r, j in blocks:
            jb, jf = j[:, _BETA], j[:, free]
            hff = jf.T @ jf
            hff += mu * (np.eye(len(free)) + np.diag(np.diag(hff)))
            hbf = jb.T @ jf
            gf = jf.T @ r
            sol = np.linalg.solve(hff, np.column_stack([hbf.T, gf]))
            schur += jb.T @ jb - hbf @ sol[:, :10]
            rhs += jb.T @ r - hbf @ sol[:, 10]
            cache.append((sol, jb))
        schur += mu * (np.eye(10) + np.diag(np.diag(schur).clip(0)))
        db = -np.linalg.solve(schur, rhs)
        cand = p.copy()
        cand[:, _BETA] += db
        for i, (sol, _) in enumerate(cache):
            cand[i, free] += -(sol[:, 10] + sol[:, :10] @ db)
        try:
            new, _ = evaluate(cand, jac=False)
        except BodyModelError:
            new = np.inf
        if new < loss:
            drop = loss - new
            p, loss = np.array([_normalise_rotation(v) for v in cand]), new
            mu = max(mu / 3.0, 1e-12)
            if drop < cfg.tol * 1e-4:
                converged = True
                break
            _, blocks = evaluate(p)
        else:
            mu *= 4.0
            if mu > 1e12:
                converged = True
                break
    if not converged:
        log.warning("shape fit hit its iteration cap; returning best parameters so far")
    p = np.array([_normalise_rotation(v) for v in p])
    return p[0, _BETA].copy(), p


def fit_shape_from_input(X, cfg: FitConfig | None = None, skel=None, layout=None) -> np.ndarray:
    return fit_input_sequence(X, cfg, skel, layout)[0]


@dataclass
class ProjectedRollout:
    raw: np.ndarray          # (N, D) decoder output before projection
    params: np.ndarray       # (N, 75) fitted body parameters
    projected: np.ndarray    # (N, D) markers of the fitted bodies
    iterations: np.ndarray   # (N, 3)
    final_loss: np.ndarray   # (N,)
    beta: np.ndarray
    layout: str = ""
    frame_rate: float = 15.0
    seconds_per_frame: float = 0.0

    def to_document(self) -> dict:
        return {
            "layout": self.layout,
            "frame_rate": self.frame_rate,
            "beta": self.beta.tolist(),
            "frames": [
                {"raw": self.raw[i].tolist(), "params": BodyParams.from_vector(self.params[i]).to_dict(),
                 "projected": self.projected[i].tolist(),
                 "iterations": [int(k) for k in self.iterations[i]],
                 "final_loss": float(self.final_loss[i])}
                for i in range(len(self.raw))
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_document()))

    def sequence(self) -> MotionSequence:
        return MotionSequence(self.projected, self.frame_rate, self.layout)


class _Projector:
    """Step hook that fits each emitted frame and returns the body's markers."""

    def __init__(self, init: np.ndarray, beta, cfg, skel, layout):
        self.prev = np.array(init, dtype=np.float64)
        self.beta, self.cfg, self.skel, self.layout = beta, cfg, skel, layout
        self.raw, self.params, self.proj, self.iters, self.loss = [], [], [], [], []
        self.elapsed = 0.0

    def __call__(self, t, frames):
        t0 = time.perf_counter()
        out = np.empty_like(frames)
        ps, its, ls = [], [], []
        for k in range(frames.shape[0]):
            try:
                fit = fit_frame(frames[k], self.prev[k], self.beta, self.cfg, self.skel, self.layout, details=True)
            except FitError as exc:
                raise FitError(f"frame {t}: {exc}", stage=exc.stage, frame=t) from None
            self.prev[k] = fit.params
            out[k] = markers_from_body(fit.params, self.skel, self.layout)
            ps.append(fit.params)
            its.append(fit.iterations)
            ls.append(fit.final_loss)
        self.raw.append(frames.copy())
        self.params.append(np.array(ps))
        self.proj.append(out.copy())
        self.iters.append(np.array(its))
        self.loss.append(np.array(ls))
        self.elapsed += time.perf_counter() - t0
        return out


def rollout_with_projection(cvae, q, X, K: int, L: int, fit_cfg: FitConfig | None, rng,
                            layout: MarkerLayout | str | None = None) -> list[ProjectedRollout]:
    """K sampled futures for one condition sequence, projected frame by frame."""
    from .sampler import sample_diverse

    fit_cfg = fit_cfg or FitConfig()
    skel = load_skeleton()
    if isinstance(layout, str) or layout is None:
        layout = load_layout(layout or (X.layout if isinstance(X, MotionSequence) else "cmu41"))
    x = X.frames if isinstance(X, MotionSequence) else np.asarray(X, dtype=np.float64)
    rate = X.frame_rate if isinstance(X, MotionSequence) else 15.0
    if fit_cfg.disabled:
        s = sample_diverse(x, K, L, cvae, q, rng)
        n = s.samples.shape[1]
        return [ProjectedRollout(s.samples[k], np.full((n, N_PARAMS), np.nan), s.samples[k].copy(),
                                 np.zeros((n, 3), dtype=int), np.zeros(n), np.zeros(10), layout.name, rate)
                for k in range(K)]
    beta, per = fit_input_sequence(x, fit_cfg, skel, layout)
    hook = _Projector(np.repeat(per[-1][None], K, axis=0), beta, fit_cfg, skel, layout)
    sample_diverse(x, K, L, cvae, q, rng, step_hook=hook)
    raw = np.stack(hook.raw, axis=1)
    params = np.stack(hook.params, axis=1)
    proj = np.stack(hook.proj, axis=1)
    iters = np.stack(hook.iters, axis=1)
    loss = np.stack(hook.loss, axis=1)
    spf = hook.elapsed / max(1, raw.shape[0] * raw.shape[1])
    return [ProjectedRollout(raw[k], params[k], proj[k], iters[k], loss[k], beta, layout.name, rate, spf)
            for k in range(K)]
