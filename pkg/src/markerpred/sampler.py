"""Band-wise diverse sampling on top of a frozen CVAE decoder.

For each of the lowest L bands a separate small network maps the
condition code to K affine transforms (a, b).  One standard-normal draw
per band is shared by all K samples and mapped to z_k = a_k * eps + b_k;
bands above L get independent white noise per sample.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, band_affine
from .cvae import CVAE, ConfigError, TrainingError, _frames
from .motion import MotionError, MotionSequence

log = logging.getLogger(__name__)


def band_count(n_bands: int, fraction: float = 0.2) -> int:
    """Number of low bands handled by the sampler under a fractional rule (45 -> 9)."""
    return int(round(n_bands * fraction))


@dataclass
class DlowConfig:
    n_bands_sampled: int = 9       # L
    n_samples: int = 50            # K the transforms are trained for
    d_q: int = 64
    lambda_recon: float = 2.0
    lambda_kl: float = 1.0
    lambda_div: float = 10.0
    sigma_div: float = 10.0


@dataclass
class BandTransform:
    scale: np.ndarray    # (d_z,)
    offset: np.ndarray   # (d_z,)


class QNet:
    def __init__(self, cfg: DlowConfig, d_cond: int, d_z: int, seed: int = 0):
        if cfg.n_bands_sampled < 1:
            raise ConfigError("the sampler network needs L >= 1 (L = 0 is plain white noise)")
        self.cfg = cfg
        self.d_cond, self.d_z = d_cond, d_z
        L, K = cfg.n_bands_sampled, cfg.n_samples
        p = self.params = ParamStore(seed)
        # separate weights per band, stored stacked along the first axis
        p.add("q.w1", (L, d_cond, cfg.d_q), fan_in=d_cond)
        p.add("q.b1", (L, cfg.d_q), fan_in=d_cond)
        p.add("q.w2", (L, cfg.d_q, K * 2 * d_z), fan_in=cfg.d_q)
        p.add("q.b2", (L, K * 2 * d_z), fan_in=cfg.d_q)
        self.meta: dict = {}

    def transforms(self, c: Tensor) -> tuple[Tensor, Tensor]:
        """(a, b), each (B, K, L, d_z), from condition codes (B, d)."""
        L, K, dz = self.cfg.n_bands_sampled, self.cfg.n_samples, self.d_z
        p = self.params
        bsz = c.shape[0]
        x = c.reshape(bsz, 1, self.d_cond)[:, np.zeros(L, dtype=int)]
        h = band_affine(x, p["q.w1"], p["q.b1"]).tanh()
        out = band_affine(h, p["q.w2"], p["q.b2"]).reshape(bsz, L, K, 2, dz)
        log_a = out[:, :, :, 0]
        b = out[:, :, :, 1]
        a = log_a.clip(-10.0, 5.0).exp()
        return stack_perm(a), stack_perm(b)      # (B, K, L, d_z)

    def band_transforms(self, c: np.ndarray, k: int) -> list[BandTransform]:
        with ad.no_grad():
            a, b = self.transforms(Tensor(np.atleast_2d(c)))
        return [BandTransform(a.data[0, k, w], b.data[0, k, w]) for w in range(self.cfg.n_bands_sampled)]

    def save(self, path, cvae_hash: str, cvae_path: str | None = None, extra: dict | None = None):
        doc = {"kind": "dlow", "config": asdict(self.cfg), "d_cond": self.d_cond, "d_z": self.d_z,
               "cvae_sha256": cvae_hash, "cvae_path": cvae_path}
        if extra:
            doc.update(extra)
        self.params.save(path, doc)

    @classmethod
    def load(cls, path) -> "QNet":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"sampler checkpoint {str(path)!r} does not exist")
        doc = json.loads(path.read_text())
        if doc.get("kind") != "dlow":
            raise ConfigError(f"{path} is not a sampler checkpoint")
        q = cls(DlowConfig(**doc["config"]), doc["d_cond"], doc["d_z"], seed=doc.get("seed", 0))
        q.params.load_document(doc)
        q.meta = {"cvae_sha256": doc.get("cvae_sha256"), "cvae_path": doc.get("cvae_path")}
        return q


def stack_perm(t: Tensor) -> Tensor:
    """(B, L, K, d) -> (B, K, L, d) through a differentiable transpose."""
    data = t.data
    return Tensor._make(np.ascontiguousarray(data.transpose(0, 2, 1, 3)), (t,),
                        lambda g: (g.transpose(0, 2, 1, 3),))


def _latents(cvae: CVAE, q: QNet | None, c: Tensor, K: int, L: int, rng):
    """(B*K, N_bands, d_z) latents plus the low-band transforms (or None)."""
    nb, dz = cvae.cfg.n_bands, cvae.cfg.d_z
    bsz = c.shape[0]
    high = rng.standard_normal((bsz, K, nb - L, dz))
    if L == 0:
        return Tensor(high.reshape(bsz * K, nb, dz)), None
    eps = rng.standard_normal((bsz, 1, L, dz))
    a, b = q.transforms(c)
    a, b = a[:, :K, :L], b[:, :K, :L]
    low = a * eps + b                                        # (B, K, L, d_z)
    z = ad.concat([low, Tensor(high)], axis=2)
    return z.reshape(bsz * K, nb, dz), (a, b)


def _check_pair(cvae: CVAE, q: QNet | None, K: int, L: int):
    if K < 1:
        raise ConfigError("K must be >= 1")
    if not 0 <= L <= cvae.cfg.n_bands:
        raise ConfigError(f"L must lie in [0, {cvae.cfg.n_bands}]")
    if L == 0:
        return
    if q is None:
        raise ConfigError("L > 0 needs a trained sampler network")
    if L > q.cfg.n_bands_sampled:
        raise ConfigError(f"sampler was trained for L = {q.cfg.n_bands_sampled}, asked for {L}")
    if K > q.cfg.n_samples:
        raise ConfigError(f"sampler provides {q.cfg.n_samples} transforms, asked for K = {K}")
    want = q.meta.get("cvae_sha256")
    if want is not None and want != cvae.params.content_hash():
        raise ConfigError("sampler checkpoint was trained against a different CVAE")


@dataclass
class DiverseSampleSet:
    samples: np.ndarray          # (K, N, D)
    L: int
    seed: int | None
    latents: np.ndarray          # (K, N_bands, d_z)
    layout: str = ""
    frame_rate: float = 15.0

    @property
    def K(self) -> int:
        return self.samples.shape[0]

    def sequences(self) -> list[MotionSequence]:
        return [MotionSequence(s, self.frame_rate, self.layout) for s in self.samples]


def sample_diverse(X, K: int, L: int, cvae: CVAE, q: QNet | None, rng, seed: int | None = None,
                   step_hook=None) -> DiverseSampleSet | list[DiverseSampleSet]:
    """K futures per condition sequence; a list when X is a batch."""
    _check_pair(cvae, q, K, L)
    x, single = _frames(X)
    layout = X.layout if isinstance(X, MotionSequence) else ""
    rate = X.frame_rate if isinstance(X, MotionSequence) else 15.0
    with ad.no_grad():
        cond = cvae.condition(x)
        z, _ = _latents(cvae, q, cond[0], K, L, rng)
        idx = np.repeat(np.arange(x.shape[0]), K)
        cond_k = (cond[0][idx], cond[1][idx], cond[2][idx])
        out = cvae.decode(None, z, cond=cond_k, step_hook=step_hook).data
    n, d = out.shape[1:]
    out = out.reshape(x.shape[0], K, n, d)
    zs = z.data.reshape(x.shape[0], K, *z.shape[1:])
    sets = [DiverseSampleSet(out[i], L, seed, zs[i], layout, rate) for i in range(x.shape[0])]
    return sets[0] if single else sets


@dataclass
class DlowLoss:
    total: Tensor
    recon: Tensor
    kl: Tensor
    diversity: Tensor

    def values(self) -> dict:
        return {k: getattr(self, k).item() for k in ("total", "recon", "kl", "diversity")}


def dlow_loss(samples: Tensor, transforms, Y_gt, cfg: DlowConfig) -> DlowLoss:
    """Best-of-K reconstruction + KL of the mapped Gaussians + pairwise energy.

    ``samples`` is (B, K, N, D), ``Y_gt`` (B, N, D); ``transforms`` is (a, b)
    with shape (B, K, L, d_z) or None when no band is transformed.
    """
    s = samples if isinstance(samples, Tensor) else Tensor(samples)
    if s.ndim == 3:
        s = s.reshape(1, *s.shape)
    bsz, K = s.shape[:2]
    if K < 2:
        raise MotionError("diversity loss needs K >= 2 samples")
    y = np.asarray(Y_gt, dtype=np.float64).reshape(bsz, 1, *s.shape[2:])
    err = (s - y).square().sum(axis=-1).mean(axis=-1)             # (B, K)
    best = np.argmin(err.data, axis=1)
    recon = err[np.arange(bsz), best].mean()
    if transforms is None:
        kl = Tensor(0.0)
    else:
        a, b = transforms
        var = a.square()
        kl = ((b.square() + var - 1.0 - var.log()) * 0.5).reshape(bsz, -1).sum(axis=-1).mean()
    flat = s.reshape(bsz, K, -1)
    iu, ju = np.triu_indices(K, k=1)
    dist2 = (flat[:, iu] - flat[:, ju]).square().sum(axis=-1)     # (B, pairs)
    div = (dist2 * (-1.0 / cfg.sigma_div)).exp().mean()
    total = recon * cfg.lambda_recon + kl * cfg.lambda_kl + div * cfg.lambda_div
    return DlowLoss(total, recon, kl, div)


@dataclass
class DlowSchedule:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0


def train_dlow(data, cvae: CVAE | None, cfg: DlowConfig, schedule: DlowSchedule | None = None,
               checkpoint=None, cvae_path: str | None = None, on_epoch=None) -> tuple[QNet, dict]:
    """Fit the per-band sampler networks; the CVAE stays untouched."""
    if cvae is None:
        raise ConfigError("sampler training needs a trained CVAE checkpoint")
    schedule = schedule or DlowSchedule()
    from .cvae import _as_arrays

    X, Y = _as_arrays(data)
    q = QNet(cfg, cvae.cfg.d_hidden, cvae.cfg.d_z, seed=schedule.seed)
    q.meta = {"cvae_sha256": cvae.params.content_hash(), "cvae_path": cvae_path}
    opt = ad.Adam(q.params, lr=schedule.lr)
    rng = np.random.default_rng(schedule.seed)
    K, L = cfg.n_samples, cfg.n_bands_sampled
    history = {k: [] for k in ("total", "recon", "kl", "diversity")}
    n = len(X)
    with cvae.params.frozen():
        for epoch in range(schedule.epochs):
            order = rng.permutation(n)
            sums = dict.fromkeys(history, 0.0)
            for start in range(0, n, schedule.batch_size):
                idx = order[start:start + schedule.batch_size]
                bsz = len(idx)
                cond = cvae.condition(X[idx])
                z, tr = _latents(cvae, q, cond[0], K, L, rng)
                rep = np.repeat(np.arange(bsz), K)
                out = cvae.decode(None, z, cond=(cond[0][rep], cond[1][rep], cond[2][rep]))
                out = out.reshape(bsz, K, *out.shape[1:])
                parts = dlow_loss(out, tr, Y[idx], cfg)
                vals = parts.values()
                if not all(math.isfinite(v) for v in vals.values()):
                    raise TrainingError(f"epoch {epoch}: non-finite sampler loss {vals}")
                ad.backward(parts.total, q.params)
                ad.clip_grad_norm(q.params, schedule.clip_norm)
                opt.step()
                for k in sums:
                    sums[k] += vals[k] * bsz
            for k in history:
                history[k].append(sums[k] / n)
            log.info("sampler epoch %d %s", epoch, {k: v[-1] for k, v in history.items()})
            if on_epoch is not None:
                on_epoch(epoch, {k: v[-1] for k, v in history.items()})
    if checkpoint is not None:
        q.save(checkpoint, q.meta["cvae_sha256"], cvae_path, {"history": history})
    return q, history
