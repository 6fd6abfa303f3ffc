"""Command-line entry point: gen-data, train-cvae, train-dlow, predict, evaluate.

Each command writes ``run_config.json`` (the fully resolved options) next
to its outputs.  Failures print a JSON error object on stderr and exit
with a nonzero status.  ``MARKERPRED_OUT`` sets the default output
directory and ``MARKERPRED_WORKERS`` the worker count for ``predict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .body import BodyModelError, forward_kinematics, load_skeleton
from .cvae import CVAE, ConfigError, CvaeConfig, TrainSchedule, TrainingError, train_cvae
from .dataset import FAMILIES, DatasetError, load_dataset, make_toy_clips, pairs_from_clips, save_dataset
from .metrics import DEFAULT_ETA, MetricError, evaluate
from .motion import MotionError
from .projection import FitConfig, FitError, frame_joints, rollout_with_projection
from .sampler import DlowConfig, DlowSchedule, QNet, band_count, sample_diverse, train_dlow

log = logging.getLogger("markerpred")

# provenance tags shown in --help
PUB = "published setting"
LOCAL = "local choice"


class CliError(Exception):
    def __init__(self, msg, key=None, path=None, code=2):
        super().__init__(msg)
        self.key, self.path, self.code = key, path, code


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("MARKERPRED_OUT")
    if not out:
        raise CliError("no output directory: pass --out or set MARKERPRED_OUT", key="out")
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _workers(args) -> int:
    if args.workers is not None:
        return max(1, args.workers)
    env = os.environ.get("MARKERPRED_WORKERS")
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise CliError(f"MARKERPRED_WORKERS must be an integer, got {env!r}", key="MARKERPRED_WORKERS") from None


def _need(path, key) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{key}: {p} does not exist", key=key, path=str(p))
    return p


def _write_config(out: Path, args, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    if extra:
        cfg.update(extra)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=1, default=str))


def _history_csv(path: Path, history: dict) -> None:
    keys = list(history)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch"] + keys)
        for i in range(len(history[keys[0]]) if keys else 0):
            w.writerow([i] + [history[k][i] for k in keys])


def _pairs(data: str, split: str | None):
    manifest = _need(Path(data) / "manifest.json" if Path(data).is_dir() else data, "data")
    _, clips = load_dataset(manifest, split)
    if not clips:
        raise CliError(f"no sequences with split {split!r} in {manifest}", key="split")
    pairs = pairs_from_clips(clips)
    X = np.stack([x.frames for x, _ in pairs])
    Y = np.stack([y.frames for _, y in pairs])
    return clips, X, Y


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> dict:
    out = _out_dir(args)
    rng = np.random.default_rng(args.seed)
    clips = make_toy_clips(args.n_clips, args.layout, args.seed, tuple(args.families), args.duration)
    n_test = int(round(args.test_fraction * len(clips)))
    splits = np.array(["train"] * len(clips), dtype=object)
    splits[rng.permutation(len(clips))[:n_test]] = "test"
    path = save_dataset(out, clips, list(splits), args.format)
    _write_config(out, args)
    return {"manifest": str(path), "n_train": len(clips) - n_test, "n_test": n_test}


def cmd_train_cvae(args) -> dict:
    out = _out_dir(args)
    _, X, Y = _pairs(args.data, "train")
    cfg = CvaeConfig(n_markers=X.shape[2] // 3, n_condition=X.shape[1], n_future=Y.shape[1],
                     d_hidden=args.d_hidden, d_z=args.d_z, d_band=args.d_band,
                     residual_output=not args.no_residual, latent_dct=not args.no_latent_dct,
                     alpha=args.alpha, robust_kld=not args.plain_kld, kld_weight=args.kld_weight)
    sched = TrainSchedule(args.epochs, args.batch_size, args.lr, args.clip_norm, args.seed)
    ckpt = out / "cvae.json"
    _, history = train_cvae((X, Y), cfg, sched, checkpoint=ckpt)
    _history_csv(out / "cvae_loss.csv", history)
    _write_config(out, args, {"cvae_config": asdict(cfg)})
    return {"checkpoint": str(ckpt), "final_recon": history["recon"][-1] if history["recon"] else None}


def cmd_train_dlow(args) -> dict:
    out = _out_dir(args)
    cvae = CVAE.load(_need(args.cvae, "cvae"))
    _, X, Y = _pairs(args.data, "train")
    L = args.L if args.L is not None else band_count(cvae.cfg.n_bands)
    cfg = DlowConfig(n_bands_sampled=L, n_samples=args.K, d_q=args.d_q, lambda_recon=args.lambda_recon,
                     lambda_kl=args.lambda_kl, lambda_div=args.lambda_div, sigma_div=args.sigma_div)
    sched = DlowSchedule(args.epochs, args.batch_size, args.lr, args.clip_norm, args.seed)
    ckpt = out / "dlow.json"
    _, history = train_dlow((X, Y), cvae, cfg, sched, checkpoint=ckpt, cvae_path=str(args.cvae))
    _history_csv(out / "dlow_loss.csv", history)
    _write_config(out, args, {"dlow_config": asdict(cfg)})
    return {"checkpoint": str(ckpt)}


def _predict_one(job):
    """Samples for one condition; seeded per sequence so worker count never matters."""
    i, x, cvae_path, dlow_path, K, L, seed, project, fit, layout = job
    cvae = CVAE.load(cvae_path)
    q = QNet.load(dlow_path) if dlow_path else None
    rng = np.random.default_rng([seed, i])
    if not project:
        s = sample_diverse(x, K, L, cvae, q, rng)
        return s.samples, None, None, None, None
    rolls = rollout_with_projection(cvae, q, x, K, L, FitConfig(**fit), rng, layout)
    skel = load_skeleton()
    raw = np.stack([r.raw for r in rolls])
    proj = np.stack([r.projected for r in rolls])
    params = np.stack([r.params for r in rolls])
    joints = forward_kinematics(skel, params) if not FitConfig(**fit).disabled else None
    return proj, raw, params, joints, [r.to_document() for r in rolls]


def cmd_predict(args) -> dict:
    out = _out_dir(args)
    clips, X, Y = _pairs(args.data, args.split)
    if args.max_sequences is not None:
        clips, X, Y = clips[: args.max_sequences], X[: args.max_sequences], Y[: args.max_sequences]
    cvae_path = str(_need(args.cvae, "cvae"))
    cvae = CVAE.load(cvae_path)
    L = args.L if args.L is not None else band_count(cvae.cfg.n_bands)
    dlow_path = str(_need(args.dlow, "dlow")) if args.dlow else None
    if L > 0 and dlow_path is None:
        raise CliError("L > 0 needs --dlow (use --L 0 for plain white-noise sampling)", key="dlow")
    fit = {"lambda1": args.lambda1, "lambda2": args.lambda2, "caps": tuple(args.caps)}
    jobs = [(i, X[i], cvae_path, dlow_path, args.K, L, args.seed, args.project, fit, clips[i].layout)
            for i in range(len(X))]
    workers = _workers(args)
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = list(ex.map(_predict_one, jobs))
    else:
        results = [_predict_one(j) for j in jobs]
    arrays = {"samples": np.stack([r[0] for r in results]), "X": X, "Y": Y,
              "ids": np.array([c.meta.get("id", str(i)) for i, c in enumerate(clips)]),
              "layout": np.array(clips[0].layout), "frame_rate": np.array(clips[0].frame_rate)}
    if args.project:
        arrays["raw"] = np.stack([r[1] for r in results])
        arrays["params"] = np.stack([r[2] for r in results])
        if results[0][3] is not None:
            arrays["joints"] = np.stack([r[3] for r in results])
        # one JSON document per condition sequence, one entry per sample
        docs = out / "rollouts"
        docs.mkdir(exist_ok=True)
        for sid, r in zip(arrays["ids"], results):
            (docs / f"{sid}.json").write_text(json.dumps({"id": str(sid), "rollouts": r[4]}))
    path = out / "predictions.npz"
    np.savez(path, **arrays)
    _write_config(out, args, {"L_resolved": L, "workers": workers})
    return {"predictions": str(path), "n_sequences": len(X), "K": args.K}


def cmd_evaluate(args) -> dict:
    out = _out_dir(args)
    with np.load(_need(args.predictions, "predictions")) as z:
        arr = {k: z[k] for k in z.files}
    for key in ("samples", "X", "Y", "layout"):
        if key not in arr:
            raise CliError(f"predictions file lacks {key!r}", key=key, path=str(args.predictions))
    layout = str(arr["layout"])
    rate = float(arr.get("frame_rate", 15.0))
    joints = arr.get("joints")
    if joints is None and args.raw_joints:
        joints = np.array([[frame_joints(s, layout) for s in seqs] for seqs in arr["samples"]])
    report = evaluate(arr["X"], arr["Y"], arr["samples"], layout, rate, args.eta, args.squared, joints)
    report.meta["predictions"] = str(args.predictions)
    js, cs = report.save(out / "metrics")
    _write_config(out, args)
    return {"report": str(js), "csv": str(cs), **report.flat()}


# -- parser -----------------------------------------------------------------------------

def _h(text, source):
    return f"{text} (default: %(default)s; {source})"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="markerpred", description="Marker-based stochastic motion prediction.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--out", default=None, help="output directory (default: $MARKERPRED_OUT)")
        if seed:
            sp.add_argument("--seed", type=int, default=0, help=_h("random seed", LOCAL))

    g = sub.add_parser("gen-data", help="generate a synthetic canonical dataset")
    common(g)
    g.add_argument("--n-clips", type=int, default=200, help=_h("number of 60-frame clips", LOCAL))
    g.add_argument("--layout", default="cmu41", help=_h("marker layout name or JSON path", LOCAL))
    g.add_argument("--families", nargs="+", default=list(FAMILIES), choices=FAMILIES,
                   help=_h("motion families", LOCAL))
    g.add_argument("--duration", type=float, default=8.0, help=_h("seconds per raw recording", LOCAL))
    g.add_argument("--test-fraction", type=float, default=0.1, help=_h("share of clips tagged test", LOCAL))
    g.add_argument("--format", choices=("bin", "csv"), default="bin", help=_h("sequence file format", LOCAL))
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-cvae", help="train the latent-DCT CVAE")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory or manifest.json")
    t.add_argument("--epochs", type=int, default=50, help=_h("training epochs", LOCAL))
    t.add_argument("--batch-size", type=int, default=32, help=_h("minibatch size", LOCAL))
    t.add_argument("--lr", type=float, default=1e-3, help=_h("Adam learning rate", LOCAL))
    t.add_argument("--clip-norm", type=float, default=5.0, help=_h("gradient norm clip", LOCAL))
    t.add_argument("--alpha", type=float, default=3.0, help=_h("weight of the velocity term", PUB))
    t.add_argument("--d-hidden", type=int, default=128, help=_h("GRU width", PUB))
    t.add_argument("--d-z", type=int, default=16, help=_h("latent size per band", PUB))
    t.add_argument("--d-band", type=int, default=32, help=_h("per-band decoder input size", LOCAL))
    t.add_argument("--no-residual", action="store_true", help="predict absolute frames instead of residuals")
    t.add_argument("--no-latent-dct", action="store_true", help="use time-indexed latents instead of DCT bands")
    t.add_argument("--plain-kld", action="store_true", help="weighted KLD instead of the robust Charbonnier form")
    t.add_argument("--kld-weight", type=float, default=None,
                   help=_h("KLD weight (None: 1 robust, 0.1 plain)", LOCAL))
    t.set_defaults(func=cmd_train_cvae)

    d = sub.add_parser("train-dlow", help="train the band-wise sampler on a frozen CVAE")
    common(d)
    d.add_argument("--data", required=True, help="dataset directory or manifest.json")
    d.add_argument("--cvae", required=True, help="CVAE checkpoint")
    d.add_argument("--K", type=int, default=50, help=_h("samples per condition", PUB))
    d.add_argument("--L", type=int, default=None, help=_h("sampled low bands (None: 20%% of bands)", PUB))
    d.add_argument("--d-q", type=int, default=64, help=_h("sampler hidden width", LOCAL))
    d.add_argument("--epochs", type=int, default=50, help=_h("training epochs", LOCAL))
    d.add_argument("--batch-size", type=int, default=16, help=_h("minibatch size", LOCAL))
    d.add_argument("--lr", type=float, default=1e-3, help=_h("Adam learning rate", LOCAL))
    d.add_argument("--clip-norm", type=float, default=5.0, help=_h("gradient norm clip", LOCAL))
    d.add_argument("--lambda-recon", type=float, default=2.0, help=_h("best-of-K reconstruction weight", LOCAL))
    d.add_argument("--lambda-kl", type=float, default=1.0, help=_h("transform KL weight", LOCAL))
    d.add_argument("--lambda-div", type=float, default=10.0, help=_h("diversity energy weight", LOCAL))
    d.add_argument("--sigma-div", type=float, default=10.0, help=_h("diversity energy scale", LOCAL))
    d.set_defaults(func=cmd_train_dlow)

    r = sub.add_parser("predict", help="sample K futures per condition sequence")
    common(r)
    r.add_argument("--data", required=True, help="dataset directory or manifest.json")
    r.add_argument("--split", default="test", help=_h("manifest split to predict", LOCAL))
    r.add_argument("--cvae", required=True, help="CVAE checkpoint")
    r.add_argument("--dlow", default=None, help="sampler checkpoint (required when L > 0)")
    r.add_argument("--K", type=int, default=50, help=_h("samples per condition", PUB))
    r.add_argument("--L", type=int, default=None, help=_h("sampled low bands (None: 20%% of bands)", PUB))
    r.add_argument("--project", action="store_true", help="fit the body to every predicted frame and feed it back")
    r.add_argument("--lambda1", type=float, default=0.0005, help=_h("body pose prior weight", PUB))
    r.add_argument("--lambda2", type=float, default=0.01, help=_h("hand pose prior weight", PUB))
    r.add_argument("--caps", type=int, nargs=3, default=[20, 30, 10],
                   help=_h("iteration caps of the three fitting stages", LOCAL))
    r.add_argument("--max-sequences", type=int, default=None, help="only predict the first N sequences")
    r.add_argument("--workers", type=int, default=None, help="worker processes (default: $MARKERPRED_WORKERS or 1)")
    r.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="compute the metric report for a predictions file")
    common(e, seed=False)
    e.add_argument("--predictions", required=True, help="predictions.npz written by predict")
    e.add_argument("--eta", type=float, default=DEFAULT_ETA, help=_h("similarity threshold for MMADE/MMFDE, m", LOCAL))
    e.add_argument("--squared", action="store_true", help="use squared per-frame distances in ADE-type metrics")
    e.add_argument("--raw-joints", action="store_true",
                   help="recover joints by per-frame fits when the file has none, to report BDF")
    e.set_defaults(func=cmd_evaluate)
    return p


def _error(exc: Exception) -> tuple[dict, int]:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    code = 1
    if isinstance(exc, CliError):
        code = exc.code
        if exc.key:
            doc["key"] = exc.key
        if exc.path:
            doc["path"] = exc.path
    elif isinstance(exc, (ConfigError, DatasetError, BodyModelError, MetricError, MotionError, ValueError)):
        code = 2
    elif isinstance(exc, FileNotFoundError):
        code = 2
        doc["path"] = exc.filename
    elif isinstance(exc, FitError):
        doc.update({"stage": exc.stage, "frame": exc.frame})
    elif isinstance(exc, TrainingError):
        code = 3
    return doc, code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # reported as JSON for scripting
        doc, code = _error(exc)
        print(json.dumps(doc), file=sys.stderr)
        return code
    print(json.dumps(result, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
