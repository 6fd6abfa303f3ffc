"""Conditional VAE with a frequency-domain latent space.

Encoder: a GRU over condition-then-future frames; its future-step hidden
states are moved to DCT bands and each band gets its own bias-free head
producing (mu, log variance).  Decoder: per-band heads map latents back to
band features, an inverse DCT returns them to time steps, and a GRU
initialised from the condition code emits one frame delta per step.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, band_affine, affine, gru_step, time_transform
from .dct import dct_matrix
from .motion import MotionError, MotionSequence

log = logging.getLogger(__name__)

LOGVAR_MIN = -20.0
LOGVAR_MAX = 10.0


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss term)."""


class ConfigError(ValueError):
    pass


@dataclass
class CvaeConfig:
    n_markers: int = 41
    n_condition: int = 15
    n_future: int = 45
    d_hidden: int = 128
    d_z: int = 16
    d_band: int = 32                # width of decoder band features
    residual_output: bool = True
    latent_dct: bool = True         # False: one latent vector for the whole future
    alpha: float = 3.0
    robust_kld: bool = True
    kld_weight: float | None = None  # None: 1.0 with the robust term, 0.1 otherwise

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if min(self.n_markers, self.n_condition, self.n_future, self.d_hidden, self.d_z, self.d_band) < 1:
            raise ConfigError("all sizes must be >= 1")
        if self.kld_weight is None:
            self.kld_weight = 1.0 if self.robust_kld else 0.1

    @property
    def frame_dim(self) -> int:
        return 3 * self.n_markers

    @property
    def n_bands(self) -> int:
        return self.n_future if self.latent_dct else 1


@dataclass
class FrequencyPosterior:
    """Per-band Gaussian parameters, (B, N_bands, d_z) tensors."""

    mean: Tensor
    log_variance: Tensor

    @property
    def n_bands(self) -> int:
        return self.mean.shape[-2]

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mean.data.copy(), self.log_variance.data.copy()


def _frames(x) -> tuple[np.ndarray, bool]:
    """(B, T, D) float array and whether the input was a single sequence."""
    if isinstance(x, MotionSequence):
        return x.frames[None], True
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], MotionSequence):
        from .motion import stack_frames

        return stack_frames(x), False
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise MotionError(f"expected (T, D) or (B, T, D) frames, got {arr.shape}")
    return arr, False


def _layout_of(x):
    if isinstance(x, MotionSequence):
        return x.layout
    if isinstance(x, (list, tuple)) and x and isinstance(x[0], MotionSequence):
        return x[0].layout
    return None


def anchor_of(x_last: np.ndarray) -> np.ndarray:
    """Marker centroid of the last condition frame, dropped to the ground."""
    pts = x_last.reshape(x_last.shape[0], -1, 3)
    a = pts.mean(axis=1)
    a[:, 2] = 0.0
    return np.tile(a, pts.shape[1])


class CVAE:
    def __init__(self, cfg: CvaeConfig, seed: int = 0):
        self.cfg = cfg
        p = self.params = ParamStore(seed)
        d, D, dz, df = cfg.d_hidden, cfg.frame_dim, cfg.d_z, cfg.d_band
        nb = cfg.n_bands
        # condition GRU over X
        p.add("cond.wx", (D, 3 * d), fan_in=d)
        p.add("cond.wh", (d, 3 * d), fan_in=d)
        p.add("cond.b", (3 * d,), fan_in=d)
        # posterior GRU over [X; Y]
        p.add("post.wx", (D, 3 * d), fan_in=d)
        p.add("post.wh", (d, 3 * d), fan_in=d)
        p.add("post.b", (3 * d,), fan_in=d)
        if cfg.latent_dct:
            p.add("post.head", (nb, d, 2 * dz), fan_in=d)
            p.add("dec.band_w", (nb, dz, df), fan_in=dz)
            p.add("dec.band_b", (nb, df), fan_in=dz)
        else:
            p.add("post.head", (d, 2 * dz), fan_in=d)
            p.add("dec.band_w", (dz, df), fan_in=dz)
            p.add("dec.band_b", (df,), fan_in=dz)
        p.add("dec.init_w", (d, d), fan_in=d)
        p.add("dec.init_b", (d,), fan_in=d)
        p.add("dec.wx_u", (df, 3 * d), fan_in=d)
        p.add("dec.wx_c", (d, 3 * d), fan_in=d)
        p.add("dec.wx_p", (D, 3 * d), fan_in=d)
        p.add("dec.wh", (d, 3 * d), fan_in=d)
        p.add("dec.b", (3 * d,), fan_in=d)
        p.add("dec.out_w", (d, D), fan_in=d)
        p.add("dec.out_b", (D,), fan_in=d)

    # -- pieces ----------------------------------------------------------------
    def _check(self, frames: np.ndarray, n: int | None, what: str):
        if frames.shape[-1] != self.cfg.frame_dim:
            raise MotionError(f"{what} width {frames.shape[-1]} != model frame width {self.cfg.frame_dim}")
        if n is not None and frames.shape[1] != n:
            raise MotionError(f"{what} has {frames.shape[1]} frames, model expects {n}")

    def _run_gru(self, prefix: str, seq: np.ndarray, h: Tensor | None = None) -> list[Tensor]:
        p = self.params
        wh, b = p[prefix + ".wh"], p[prefix + ".b"]
        gx = Tensor(seq) @ p[prefix + ".wx"]                 # (B, T, 3d) in one product
        if h is None:
            h = Tensor(np.zeros((seq.shape[0], self.cfg.d_hidden)))
        states = []
        for t in range(seq.shape[1]):
            h = gru_step(h, gx[:, t], None, wh, b)
            states.append(h)
        return states

    def condition(self, X) -> tuple[Tensor, np.ndarray, np.ndarray]:
        """Condition code c (B, d), anchor (B, D) and last condition frame (B, D)."""
        x, _ = _frames(X)
        self._check(x, None, "condition")
        x_last = x[:, -1]
        anchor = anchor_of(x_last)
        states = self._run_gru("cond", x - anchor[:, None])
        return states[-1], anchor, x_last

    def encode(self, X, Y) -> FrequencyPosterior:
        lx, ly = _layout_of(X), _layout_of(Y)
        if lx is not None and ly is not None and lx != ly:
            raise MotionError(f"condition layout {lx!r} differs from future layout {ly!r}")
        x, _ = _frames(X)
        y, _ = _frames(Y)
        self._check(x, None, "condition")
        self._check(y, self.cfg.n_future, "future")
        if x.shape[0] != y.shape[0]:
            raise MotionError("condition and future batch sizes differ")
        anchor = anchor_of(x[:, -1])
        seq = np.concatenate([x, y], axis=1) - anchor[:, None]
        states = self._run_gru("post", seq)
        cfg = self.cfg
        if cfg.latent_dct:
            hs = ad.stack(states[-cfg.n_future:], axis=1)        # (B, N, d)
            bands = time_transform(dct_matrix(cfg.n_future), hs)
            out = band_affine(bands, self.params["post.head"])
        else:
            out = affine(states[-1], self.params["post.head"]).reshape(x.shape[0], 1, 2 * cfg.d_z)
        mu = out[:, :, : cfg.d_z]
        logvar = out[:, :, cfg.d_z:].clip(LOGVAR_MIN, LOGVAR_MAX)
        return FrequencyPosterior(mu, logvar)

    def decode(self, X, Z, step_hook: Callable | None = None, cond=None) -> Tensor:
        """Future frames (B, N, D); ``Z`` is (B, N_bands, d_z) or (N_bands, d_z).

        ``step_hook(t, frames)`` may replace each emitted (B, D) frame before
        it feeds the next step; it is meant for no-grad rollouts.
        """
        cfg, p = self.cfg, self.params
        z = Z if isinstance(Z, Tensor) else Tensor(np.asarray(Z, dtype=np.float64))
        if z.ndim == 2:
            z = z.reshape(1, *z.shape)
        if z.shape[1:] != (cfg.n_bands, cfg.d_z):
            raise MotionError(f"latent has shape {z.shape[1:]}, decoder expects ({cfg.n_bands}, {cfg.d_z})")
        c, anchor, x_last = cond if cond is not None else self.condition(X)
        bsz = z.shape[0]
        if c.shape[0] != bsz:
            if c.shape[0] != 1:
                raise MotionError("latent batch does not match condition batch")
            idx = np.zeros(bsz, dtype=int)
            c, anchor, x_last = c[idx], anchor[idx], x_last[idx]
        if cfg.latent_dct:
            feats = band_affine(z, p["dec.band_w"], p["dec.band_b"])   # (B, N, df)
            u = time_transform(dct_matrix(cfg.n_future).T, feats)
            gx_static = u @ p["dec.wx_u"] + (c @ p["dec.wx_c"]).reshape(bsz, 1, 3 * cfg.d_hidden)
        else:
            feats = affine(z.reshape(bsz, cfg.d_z), p["dec.band_w"], p["dec.band_b"])
            step_in = feats @ p["dec.wx_u"] + c @ p["dec.wx_c"]
            gx_static = None
        h = affine(c, p["dec.init_w"], p["dec.init_b"]).tanh()
        prev = Tensor(x_last)
        outs = []
        for t in range(cfg.n_future):
            g_t = gx_static[:, t] if gx_static is not None else step_in
            g_t = g_t + (prev - anchor) @ p["dec.wx_p"]
            h = gru_step(h, g_t, None, p["dec.wh"], p["dec.b"])
            delta = affine(h, p["dec.out_w"], p["dec.out_b"])
            frame = prev + delta if cfg.residual_output else delta + anchor
            if step_hook is not None:
                replaced = step_hook(t, frame.data.copy())
                if replaced is not None:
                    frame = Tensor(np.asarray(replaced, dtype=np.float64).reshape(frame.shape))
            outs.append(frame)
            prev = frame
        return ad.stack(outs, axis=1)

    def reconstruct(self, X, Y, rng) -> tuple[Tensor, FrequencyPosterior]:
        post = self.encode(X, Y)
        z = reparameterize(post, rng)
        return self.decode(X, z), post

    def sample_prior(self, X, n: int, rng) -> np.ndarray:
        """n futures from N(0, I) latents for one condition, shape (n, N, D)."""
        with ad.no_grad():
            cond = self.condition(X)
            z = rng.standard_normal((n, self.cfg.n_bands, self.cfg.d_z))
            return self.decode(X, z, cond=cond).data

    # -- checkpoints -------------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        doc = {"kind": "cvae", "config": asdict(self.cfg)}
        if extra:
            doc.update(extra)
        self.params.save(path, doc)

    @classmethod
    def load(cls, path) -> "CVAE":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"CVAE checkpoint {str(path)!r} does not exist")
        doc = json.loads(path.read_text())
        if doc.get("kind") != "cvae":
            raise ConfigError(f"{path} is not a CVAE checkpoint")
        model = cls(CvaeConfig(**doc["config"]), seed=doc.get("seed", 0))
        model.params.load_document(doc)
        return model


def reparameterize(post: FrequencyPosterior, rng) -> Tensor:
    """Z = mu + exp(logvar / 2) * eps with eps drawn from ``rng``."""
    eps = rng.standard_normal(post.mean.shape)
    return post.mean + (post.log_variance * 0.5).exp() * eps


def kld_elements(mean, log_variance):
    """Elementwise KL(N(mu, sigma^2) || N(0, 1))."""
    if isinstance(mean, Tensor) or isinstance(log_variance, Tensor):
        mu, lv = ad.as_tensor(mean), ad.as_tensor(log_variance)
        return (mu.square() + lv.exp() - 1.0 - lv) * 0.5
    mu = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(log_variance, dtype=np.float64)
    return 0.5 * (mu * mu + np.exp(lv) - 1.0 - lv)


def kld_standard_normal(post) -> float:
    """Total KL over every band and latent dimension of one posterior."""
    if isinstance(post, FrequencyPosterior):
        mu, lv = post.mean.data, post.log_variance.data
    else:
        mu, lv = post
    return float(np.sum(kld_elements(mu, lv)))


def robust_psi(s):
    """sqrt(1 + s^2) - 1; the slope s / sqrt(1 + s^2) fades as s -> 0."""
    if isinstance(s, Tensor):
        return (s.square() + 1.0).sqrt() - 1.0
    s = np.asarray(s, dtype=np.float64)
    # written as s^2 / (sqrt(1 + s^2) + 1) to keep precision for small s
    out = s * s / (np.sqrt(1.0 + s * s) + 1.0)
    return float(out) if out.ndim == 0 else out


def robust_psi_grad(s):
    s = np.asarray(s, dtype=np.float64)
    return s / np.sqrt(1.0 + s * s)


@dataclass
class LossParts:
    total: Tensor
    recon: Tensor
    velocity: Tensor
    kld_term: Tensor
    kld: float

    def values(self) -> dict:
        return {"total": self.total.item(), "recon": self.recon.item(),
                "velocity": self.velocity.item(), "kld_term": self.kld_term.item(), "kld": self.kld}


def elbo_loss(Y, Y_rec, post: FrequencyPosterior | None, cfg: CvaeConfig, x_last=None) -> LossParts:
    """Reconstruction + alpha * velocity (or first-frame) term + KL regulariser.

    All terms are averaged over the batch; the KL divergence of each
    sample is summed over bands and dimensions before Psi is applied.
    """
    y = Y if isinstance(Y, Tensor) else Tensor(_frames(Y)[0])
    yr = Y_rec if isinstance(Y_rec, Tensor) else Tensor(_frames(Y_rec)[0])
    if y.ndim == 2:
        y = y.reshape(1, *y.shape)
    if yr.ndim == 2:
        yr = yr.reshape(1, *yr.shape)
    if y.shape != yr.shape:
        raise MotionError(f"target {y.shape} and reconstruction {yr.shape} differ in shape")
    recon = (y - yr).abs().mean()
    if cfg.residual_output:
        dy = y[:, 1:] - y[:, :-1]
        dyr = yr[:, 1:] - yr[:, :-1]
        second = (dy - dyr).abs().mean() if y.shape[1] > 1 else Tensor(0.0)
    else:
        if x_last is None:
            raise MotionError("the first-frame term needs the last condition frame")
        xl = np.asarray(x_last, dtype=np.float64).reshape(yr.shape[0], -1)
        second = (yr[:, 0] - xl).square().sum(axis=-1).mean()
    if post is None:
        reg = Tensor(0.0)
        kld_val = 0.0
    else:
        bsz = post.mean.shape[0]
        per = kld_elements(post.mean, post.log_variance).reshape(bsz, -1).sum(axis=-1)   # (B,)
        kld_val = float(per.data.mean())
        reg = robust_psi(per).mean() if cfg.robust_kld else per.mean() * cfg.kld_weight
        if cfg.robust_kld and cfg.kld_weight != 1.0:
            reg = reg * cfg.kld_weight
    total = recon + second * cfg.alpha + reg
    return LossParts(total, recon, second, reg, kld_val)


@dataclass
class TrainSchedule:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple) and len(data) == 2 and isinstance(data[0], np.ndarray):
        return np.asarray(data[0], dtype=np.float64), np.asarray(data[1], dtype=np.float64)
    pairs = list(data)
    if not pairs:
        raise ConfigError("training set is empty")
    return (np.stack([_frames(x)[0][0] for x, _ in pairs]),
            np.stack([_frames(y)[0][0] for _, y in pairs]))


def train_cvae(data, cfg: CvaeConfig, schedule: TrainSchedule | None = None,
               model: CVAE | None = None, checkpoint=None,
               on_epoch: Callable | None = None) -> tuple[CVAE, dict]:
    """Adam on elbo_loss over (X, Y) pairs; returns the model and per-epoch means."""
    schedule = schedule or TrainSchedule()
    X, Y = _as_arrays(data)
    if len(X) == 0:
        raise ConfigError("training set is empty")
    model = model or CVAE(cfg, seed=schedule.seed)
    opt = ad.Adam(model.params, lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    history = {k: [] for k in ("total", "recon", "velocity", "kld_term", "kld")}
    n = len(X)
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        sums = dict.fromkeys(history, 0.0)
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            y_rec, post = model.reconstruct(X[idx], Y[idx], rng)
            parts = elbo_loss(Y[idx], y_rec, post, cfg, x_last=X[idx, -1])
            vals = parts.values()
            bad = [k for k, v in vals.items() if not math.isfinite(v)]
            if bad:
                raise TrainingError(f"epoch {epoch}: non-finite loss term(s) {bad}: {vals}")
            ad.backward(parts.total, model.params)
            ad.clip_grad_norm(model.params, schedule.clip_norm)
            opt.step()
            for k in sums:
                sums[k] += vals[k] * len(idx)
        for k in history:
            history[k].append(sums[k] / n)
        log.info("epoch %d total %.4f recon %.4f kld %.3f", epoch, history["total"][-1],
                 history["recon"][-1], history["kld"][-1])
        if on_epoch is not None:
            on_epoch(epoch, {k: v[-1] for k, v in history.items()})
    if checkpoint is not None:
        model.save(checkpoint, {"history": history})
    return model, history


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
