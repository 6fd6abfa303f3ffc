import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from markerpred import metrics as M
from markerpred.body import MarkerLayout, load_layout, load_skeleton, markers_from_body, rest_params
from markerpred.metrics import MetricError

SKEL = load_skeleton()


# -- brute-force oracles: plain loops over the definitions ---------------------------------

def bf_dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def bf_diversity(S):
    K = len(S)
    tot, n = 0.0, 0
    for i in range(K):
        for j in range(i + 1, K):
            tot += bf_dist(S[i].ravel(), S[j].ravel())
            n += 1
    return tot / n


def bf_ade(S, G):
    best = float("inf")
    for s in S:
        best = min(best, sum(bf_dist(s[t], G[t]) for t in range(len(G))) / len(G))
    return best


def bf_fde(S, G):
    return min(bf_dist(s[-1], G[-1]) for s in S)


def bf_mm(S, pool, x, eta, final):
    vals = []
    for xs, ys in pool:
        if bf_dist(xs[-1], x[-1]) < eta:
            vals.append(bf_fde(S, ys) if final else bf_ade(S, ys))
    return sum(vals) / len(vals)


def bf_entropy_avg(seqs):
    vals = []
    for seq in seqs:
        T, D = seq.shape
        for c in range(D):
            power = []
            for k in range(1, T):
                s = sum(seq[t, c] * math.cos(math.pi * (2 * t + 1) * k / (2 * T)) for t in range(T))
                power.append((s * math.sqrt(2.0 / T)) ** 2)
            tot = sum(power)
            if tot <= 0:
                continue
            vals.append(-sum(p / tot * math.log(p / tot) for p in power if p > 0))
    return sum(vals) / len(vals) if vals else 0.0


def bf_pair_std(points, pairs):
    total = 0.0
    for i, j in pairs:
        d = [bf_dist(points[t][i], points[t][j]) for t in range(len(points))]
        mu = sum(d) / len(d)
        total += math.sqrt(sum((v - mu) ** 2 for v in d) / len(d))
    return total


def small_layout(names):
    return MarkerLayout("tiny", tuple(names), np.zeros(len(names), dtype=int), np.zeros((len(names), 3)))


def random_instance(seed, K=None, T=None, V=None):
    r = np.random.default_rng(seed)
    K = K or r.integers(2, 6)
    T = T or r.integers(2, 11)
    V = V or r.integers(1, 5)
    S = r.normal(size=(K, T, 3 * V))
    G = r.normal(size=(T, 3 * V))
    return r, S, G


# -- examples -----------------------------------------------------------------------------

def test_diversity_examples():
    Y = np.random.default_rng(0).normal(size=(5, 6))
    assert M.diversity(np.stack([Y, Y, Y])) == 0.0
    assert M.diversity(np.stack([Y, Y + 0.3])) == pytest.approx(0.3 * math.sqrt(30), rel=1e-12)
    with pytest.raises(MetricError):
        M.diversity(Y[None])


def test_ade_fde_examples():
    G = np.random.default_rng(1).normal(size=(4, 6))
    assert M.ade(np.stack([G + 1, G]), G) == 0.0
    assert M.fde(np.stack([G + 1, G]), G) == 0.0
    one = np.zeros((1, 1, 3))
    assert M.ade(one + [0.3, 0, 0], one[0]) == pytest.approx(0.3)
    assert M.fde(one + [0.3, 0, 0], one[0]) == pytest.approx(0.3)
    with pytest.raises(MetricError):
        M.ade(np.zeros((0, 1, 3)), one[0])


def test_squared_distance_flag():
    G = np.zeros((2, 3))
    S = np.array([[[0.5, 0, 0], [0.0, 0, 0]]])
    assert M.ade(S, G, squared=True) == pytest.approx(0.125)
    assert M.ade(S, G) == pytest.approx(0.25)


def test_mmade_examples():
    r, S, G = random_instance(3, K=4, T=5, V=2)
    X = r.normal(size=(3, 6))
    pool = [(X, G), (X + 5.0, G + 1.0)]
    assert M.mmade(S, pool, X, eta=1e-9) == M.ade(S, G)
    assert M.mmfde(S, pool, X, eta=1e-9) == M.fde(S, G)
    with pytest.raises(MetricError):
        M.mmade(S, [], X)


def test_mmade_hand_fixture():
    # one marker, two frames, one sample at the origin; two similar ground truths
    S = np.zeros((1, 2, 3))
    X = np.zeros((1, 3))
    g1 = np.array([[0.0, 0, 0], [0.2, 0, 0]])
    g2 = np.array([[0.4, 0, 0], [0.0, 0, 0]])
    pool = [(X, g1), (X + [0.1, 0, 0], g2), (X + [2.0, 0, 0], g2 * 10)]
    assert M.mmade(S, pool, X) == pytest.approx((0.1 + 0.2) / 2)
    assert M.mmfde(S, pool, X) == pytest.approx((0.2 + 0.0) / 2)


def test_fse_examples():
    assert M.spectral_entropy([0.5, 0.5]) - M.spectral_entropy([1.0, 0.0]) == pytest.approx(math.log(2))
    assert M.spectral_entropy([0.0, 0.0]) is None
    r = np.random.default_rng(4)
    G = r.normal(size=(45, 6))
    assert M.fse(G[None], G) == 0.0
    t = np.arange(45)
    sine = np.repeat(np.cos(np.pi * (2 * t + 1) * 3 / 90)[:, None], 6, axis=1)
    assert M.fse(sine[None], G) < -2.0
    with pytest.raises(MetricError):
        M.fse(np.zeros((1, 1, 3)), np.zeros((1, 3)))


def test_fse_skips_flat_coordinates():
    r = np.random.default_rng(5)
    G = r.normal(size=(8, 3))
    S = G.copy()
    S[:, 1] = 2.0            # constant coordinate: no power outside DC
    assert M.fse(S[None], G) == pytest.approx(bf_entropy_avg([S]) - bf_entropy_avg([G]), abs=1e-12)


def heel_clip(z, step, T=45):
    lay = small_layout(["LHEE", "RHEE"])
    frames = np.zeros((T, 6))
    frames[:, 0] = np.arange(T) * step
    frames[:, 3] = np.arange(T) * step + 0.3
    frames[:, [2, 5]] = z
    return frames, lay


def test_foot_skate_fixtures():
    f, lay = heel_clip(0.01, 0.01)
    assert M.foot_skate_ratio(f, lay, 15.0) == 1.0
    f, lay = heel_clip(0.01, 0.0)
    assert M.foot_skate_ratio(f, lay, 15.0) == 0.0
    f, lay = heel_clip(0.01, 0.0)
    f[1:11, [0, 3]] += np.arange(1, 11)[:, None] * 0.01      # 10 sliding transitions
    f[11:, [0, 3]] += 0.10
    assert M.foot_skate_ratio(f, lay, 15.0) == 10 / 44


def test_foot_skate_needs_both_heels_low_and_fast():
    f, lay = heel_clip(0.01, 0.01)
    f[:, 5] = 0.2                      # right heel lifted
    assert M.foot_skate_ratio(f, lay, 15.0) == 0.0
    f, lay = heel_clip(0.01, 0.004)    # 0.06 m/s is below the limit
    assert M.foot_skate_ratio(f, lay, 15.0) == 0.0
    with pytest.raises(MetricError):
        M.foot_skate_ratio(np.zeros((3, 3)), small_layout(["LHEE"]), 15.0)


def test_deformation_examples():
    lay = small_layout(["A", "B"])
    d = [1.0, 1.0, 1.2, 1.2]
    f = np.zeros((4, 6))
    f[:, 3] = d
    assert M.deformation_score(f[None], ["A", "B"], lay) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(MetricError):
        M.deformation_score(f[None], ["A", "C"], lay)


def test_deformation_of_body_rollouts_is_zero():
    r = np.random.default_rng(6)
    lay = load_layout("cmu41")
    v = np.tile(rest_params().to_vector(), (10, 1))
    v[:, 19:] = r.normal(scale=0.5, size=(10, 56))
    v[:, :3] += r.normal(size=(10, 3))
    frames = markers_from_body(v, SKEL, lay)
    for part in M.PART_GROUPS:
        assert M.deformation_score(frames[None], part, lay) < 1e-9


def test_deformation_invariant_to_rigid_motion():
    r = np.random.default_rng(7)
    lay = small_layout(["A", "B", "C"])
    f = r.normal(size=(6, 9))
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    g = (f.reshape(6, 3, 3) @ q.T + r.normal(size=3)).reshape(6, 9)
    assert M.deformation_score(f[None], list("ABC"), lay) == pytest.approx(
        M.deformation_score(g[None], list("ABC"), lay), abs=1e-12)


def test_bone_deformation_examples():
    from markerpred.body import forward_kinematics
    r = np.random.default_rng(8)
    v = np.tile(rest_params().to_vector(), (12, 1))
    v[:, 19:] = r.normal(scale=0.5, size=(12, 56))
    joints = forward_kinematics(SKEL, v)
    assert M.bone_deformation(joints) < 1e-9
    grow = joints.copy()
    k, a = SKEL.index("left_knee"), SKEL.index("left_ankle")
    length = np.linalg.norm(joints[0, a] - joints[0, k])
    extra = np.linspace(0, 0.1, 12)
    unit = (joints[:, a] - joints[:, k]) / length
    # move the ankle (and everything below it) along the shin
    for j in (a, SKEL.index("left_foot")):
        grow[:, j] += unit * extra[:, None]
    assert M.bone_deformation(grow) == pytest.approx(np.std(length + extra), abs=1e-12)
    with pytest.raises(MetricError):
        M.bone_deformation(joints, bones=[("left_knee", "tail")])


# -- oracle equivalence ------------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 1_000_000))
def test_metrics_match_brute_force(seed):
    r, S, G = random_instance(seed)
    X = r.normal(size=(3, G.shape[1]))
    pool = [(X, G)] + [(X + r.normal(scale=0.3, size=X.shape), r.normal(size=G.shape)) for _ in range(3)]
    assert abs(M.diversity(S) - bf_diversity(S)) < 1e-12
    assert abs(M.ade(S, G) - bf_ade(S, G)) < 1e-12
    assert abs(M.fde(S, G) - bf_fde(S, G)) < 1e-12
    assert abs(M.mmade(S, pool, X, 0.5) - bf_mm(S, pool, X, 0.5, False)) < 1e-12
    assert abs(M.mmfde(S, pool, X, 0.5) - bf_mm(S, pool, X, 0.5, True)) < 1e-12
    assert abs(M.fse(S, G) - (bf_entropy_avg(S) - bf_entropy_avg([G]))) < 1e-12
    V = G.shape[1] // 3
    names = [f"M{i}" for i in range(V)]
    lay = small_layout(names)
    pairs = [(i, j) for i in range(V) for j in range(i + 1, V)]
    want = sum(bf_pair_std(s.reshape(len(s), V, 3), pairs) for s in S) / len(S)
    assert abs(M.deformation_score(S, names, lay) - want) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1_000_000))
def test_bdf_matches_brute_force(seed):
    r = np.random.default_rng(seed)
    joints = r.normal(size=(r.integers(2, 4), r.integers(2, 11), SKEL.n_joints, 3))
    pairs = [(SKEL.index(a), SKEL.index(b)) for a, b in M.LIMB_BONES]
    want = sum(bf_pair_std(s, pairs) for s in joints) / len(joints)
    assert abs(M.bone_deformation(joints) - want) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1_000_000))
def test_distance_metrics_rigid_invariance(seed):
    r, S, G = random_instance(seed)
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    shift = r.normal(size=3)
    move = lambda a: (a.reshape(*a.shape[:-1], -1, 3) @ q.T + shift).reshape(a.shape)
    for f in (M.ade, M.fde):
        assert abs(f(S, G) - f(move(S), move(G))) < 1e-10
    assert abs(M.diversity(S) - M.diversity(move(S))) < 1e-10


def test_report_serialisation(tmp_path):
    r = np.random.default_rng(9)
    lay = load_layout("cmu41")
    v = np.tile(rest_params().to_vector(), (45, 1))
    frames = markers_from_body(v, SKEL, lay)
    X = np.repeat(frames[:1], 15, axis=0)[None]
    Y = frames[None]
    S = np.stack([frames, frames + 0.01])[None]
    rep = M.evaluate(X, Y, S, lay)
    assert rep.ade == 0.0 and rep.fde == 0.0
    assert set(rep.deformation) == set(M.PART_GROUPS)
    js, cs = rep.save(tmp_path / "m")
    doc = json.loads(js.read_text())
    assert doc["ade"] == 0.0
    head, row = cs.read_text().strip().splitlines()
    assert head.split(",")[:3] == ["diversity", "ade", "fde"]
    assert len(row.split(",")) == len(head.split(","))
    for k, val in rep.flat().items():
        if isinstance(val, float) and k != "fse":
            assert val >= 0
