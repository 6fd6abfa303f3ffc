import time

import numpy as np
import pytest

from markerpred import autodiff as ad


def central_diff(f, x, eps=1e-6):
    """Numerical gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(b))))


def tensor_grads(build, arrays):
    """Gradients of build(*tensors) w.r.t. every input array via reverse mode."""
    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*ts)
    ad.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def fd_grads(build, arrays, eps=1e-6):
    res = []
    for k in range(len(arrays)):
        def f(v, k=k):
            args = [ad.Tensor(a) for a in arrays]
            args[k] = ad.Tensor(v)
            with ad.no_grad():
                return build(*args).item()
        res.append(central_diff(f, arrays[k], eps))
    return res


# -- acceptance bookkeeping ---------------------------------------------------------------

CRITERIA: dict[int, str] = {}
TIMINGS: dict[str, float] = {}


def record_criterion(number: int, title: str, checks: dict) -> bool:
    """Print and remember one PASS/FAIL line; the caller still asserts."""
    ok = all(bool(v) for v in checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}"
    if failed:
        line += "  (failed: " + ", ".join(failed) + ")"
    CRITERIA[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- shared toy models (trained once per session) ---------------------------------------

TOY_CLIPS = 240
TOY_TRAIN = 200


@pytest.fixture(scope="session")
def toy_data():
    from markerpred.dataset import make_toy_clips, pairs_from_clips
    from markerpred.motion import stack_frames

    pairs = pairs_from_clips(make_toy_clips(TOY_CLIPS, layout="reduced10", seed=0))
    X = stack_frames([x for x, _ in pairs])
    Y = stack_frames([y for _, y in pairs])
    return {"Xtr": X[:TOY_TRAIN], "Ytr": Y[:TOY_TRAIN], "Xte": X[TOY_TRAIN:], "Yte": Y[TOY_TRAIN:]}


@pytest.fixture(scope="session")
def toy_cvae(toy_data):
    from markerpred.cvae import CvaeConfig, TrainSchedule, train_cvae

    cfg = CvaeConfig(n_markers=10, d_hidden=48, d_z=16, d_band=16)
    t0 = time.perf_counter()
    model, history = train_cvae((toy_data["Xtr"], toy_data["Ytr"]), cfg, TrainSchedule(epochs=50, seed=0))
    TIMINGS["toy_cvae"] = time.perf_counter() - t0
    return model, history


# loss weights scaled to the toy data (see README): the default KL weight pins the
# transforms to the identity on sequences this small
TOY_DLOW = dict(n_samples=10, lambda_kl=0.01, sigma_div=1.0)


@pytest.fixture(scope="session")
def toy_dlow(toy_data, toy_cvae):
    from markerpred.sampler import DlowConfig, DlowSchedule, train_dlow

    model, _ = toy_cvae
    out = {}
    for L in (1, 9):
        q, hist = train_dlow((toy_data["Xtr"][:96], toy_data["Ytr"][:96]), model,
                             DlowConfig(n_bands_sampled=L, **TOY_DLOW), DlowSchedule(epochs=10, seed=0))
        out[L] = (q, hist)
    return out
