"""Acceptance gate: the nine release criteria, each at its stated tolerance.

Criteria run against the standard synthetic benchmark (16x16, 500 patches
per class, separation 4, width-8 QUB1/QUB2 trained for 10 epochs at
lr 1e-4), with closed-form and oracle checks on the numeric layers.
"""

import math
import time

import numpy as np
import pytest

from tlab import attacks as A
from tlab import boost as B
from tlab import datasets as D
from tlab import metrics as X
from tlab import models as M
from tlab import tensor as T
from tlab.errors import FormatError
from tlab.harness import (CSV_HEADER, ModelRegistry, ScenarioSpec,
                          TransferReport, ReportRow, parse_report,
                          render_report, run_scenario)
from tlab.attacks import AttackConfig
from tlab.boost import BoostConfig

import conftest
from conftest import LinearModel, correctly_classified

RNG = np.random.default_rng(20240816)


def pool_of(model, dataset, n, seed=0):
    """Correctly-classified (x01, y) pairs drawn from the val and test splits."""
    return correctly_classified(model, dataset, n, splits=("val", "test"),
                                seed=seed)


# ---------------------------------------------------------------------------
# 1. gradient correctness: analytic vs central finite differences
# ---------------------------------------------------------------------------

def _fd_check(f, analytic, x, n_points, rng, rtol=1e-3, h=1e-3):
    flat = x.reshape(-1)
    gflat = analytic.reshape(-1)
    for _ in range(n_points):
        i = int(rng.integers(0, flat.size))
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        fd = (fp - fm) / (2 * h)
        assert abs(gflat[i] - fd) <= rtol * max(abs(fd), 1e-4), \
            f"coordinate {i}: analytic {gflat[i]} vs fd {fd}"


def _conv_ref64(x, k, b):
    """Float64 same-padding cross-correlation (independent of the package)."""
    xp = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2, x.shape[3] + 2))
    xp[:, :, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, k) + b[None, :, None, None]


def test_criterion_1_gradients_match_finite_differences():
    # Finite differences are evaluated on float64 reference forwards so the
    # oracle itself is not round-off limited; the analytic gradients under
    # test come from the package's float32 backward passes.
    start = time.monotonic()
    rng = np.random.default_rng(11)

    # conv input gradient
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((1, 3, 6, 6))
    g, _, _ = T.conv2d_backward_batch(x, k, proj, need_param_grads=False)
    _fd_check(lambda: float((_conv_ref64(x, k, b) * proj).sum()),
              g, x, 100, rng)

    # max-pool input gradient, away from within-window ties
    x = rng.standard_normal((1, 2, 8, 8))
    x += np.arange(x.size).reshape(x.shape) * 0.01  # breaks ties decisively
    proj = rng.standard_normal((1, 2, 4, 4))
    _, idx = T.maxpool2x2_forward_batch(x)
    g = T.maxpool2x2_backward_batch(idx, proj)

    def pool_ref():
        n, c, h, w = x.shape
        pooled = x.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
        return float((pooled * proj).sum())

    _fd_check(pool_ref, g, x, 100, rng)

    # relu input gradient, away from the kink
    x = rng.standard_normal((1, 2, 8, 8))
    x[np.abs(x) < 0.05] = 0.1
    proj = rng.standard_normal(x.shape)
    g = T.relu_backward(x, proj)
    _fd_check(lambda: float((np.maximum(x, 0.0) * proj).sum()), g, x, 100, rng)

    # dense input gradient
    x = rng.standard_normal((1, 20))
    w = rng.standard_normal((4, 20))
    b = rng.standard_normal(4)
    proj = rng.standard_normal((1, 4))
    g, _, _ = T.dense_backward_batch(x, w, proj, need_param_grads=False)
    _fd_check(lambda: float(((x @ w.T + b) * proj).sum()), g, x, 100, rng)

    # softmax cross-entropy logit gradient
    z = rng.standard_normal((1, 5))
    _, g = T.softmax_cross_entropy_batch(z, np.array([2]))

    def ce_ref():
        zz = z[0]
        m = zz.max()
        return float(m + np.log(np.exp(zz - m).sum()) - zz[2])

    _fd_check(ce_ref, g, z, 100, rng)

    assert time.monotonic() - start < 30


# ---------------------------------------------------------------------------
# 2. oracle equivalence
# ---------------------------------------------------------------------------

def conv_oracle(x, k, b):
    c_in, h, w = x.shape
    xp = np.zeros((c_in, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    out = np.zeros((k.shape[0], h, w))
    for co in range(k.shape[0]):
        for i in range(h):
            for j in range(w):
                out[co, i, j] = b[co] + sum(
                    xp[ci, i + di, j + dj] * k[co, ci, di, dj]
                    for ci in range(c_in) for di in range(3) for dj in range(3))
    return out


def jsma_pair_oracle(gt, gy, adm_pos, adm_neg):
    best = None
    for sign, adm in ((1.0, adm_pos), (-1.0, adm_neg)):
        for i in range(len(gt)):
            for j in range(i + 1, len(gt)):
                if not (adm[i] and adm[j]):
                    continue
                alpha, beta = gt[i] + gt[j], gy[i] + gy[j]
                if (alpha > 0 and beta < 0) if sign > 0 else (alpha < 0 and beta > 0):
                    score = -alpha * beta
                    if best is None or score > best[0]:
                        best = (score, i, j, sign)
    return None if best is None else best[1:]


def test_criterion_2_oracle_equivalence():
    start = time.monotonic()
    rng = np.random.default_rng(22)

    for _ in range(10):
        x = rng.standard_normal((2, 5, 5)).astype(np.float32)
        k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        b = rng.standard_normal(3).astype(np.float32)
        got = T.conv2d_forward_batch(x[None], k, b)[0]
        assert np.max(np.abs(got - conv_oracle(x, k, b))) <= 1e-5

    from decimal import Decimal, getcontext
    getcontext().prec = 50
    for _ in range(100):
        a = rng.uniform(0, 255, (5, 5))
        bb = a + rng.uniform(-10, 10, (5, 5))
        s = X.distortion(a, bb)
        diffs = [Decimal(float(p)) - Decimal(float(q))
                 for p, q in zip(a.ravel(), bb.ravel())]
        mse = sum(d * d for d in diffs) / len(diffs)
        psnr = float(20 * (Decimal(255).ln() - mse.sqrt().ln()) / Decimal(10).ln())
        assert abs(s.psnr_db - psnr) <= 1e-6
        assert abs(s.l1_mean - np.abs(a - bb).mean()) <= 1e-6
        assert abs(s.max_abs - np.abs(a - bb).max()) <= 1e-6

    for trial in range(30):
        r = np.random.default_rng(trial)
        gt, gy = r.standard_normal(16), r.standard_normal(16)
        adm_pos, adm_neg = r.random(16) < 0.8, r.random(16) < 0.8
        assert (A.jsma_select_pair(gt, gy, adm_pos, adm_neg)
                == jsma_pair_oracle(gt, gy, adm_pos, adm_neg))

    assert time.monotonic() - start < 60


# ---------------------------------------------------------------------------
# 3. benchmark training accuracy
# ---------------------------------------------------------------------------

def test_criterion_3_training_accuracy(fixture_dataset, qub2_model, qub1_model):
    xs, ys = fixture_dataset.split_arrays("test")
    acc2 = qub2_model.accuracy(xs, ys)
    acc1 = qub1_model.accuracy(xs, ys)
    assert acc2 >= 0.95, f"QUB2 test accuracy {acc2}"
    assert acc1 >= 0.95, f"QUB1 test accuracy {acc1}"
    assert conftest.TRAIN_SECONDS["QUB2"] + conftest.TRAIN_SECONDS["QUB1"] < 180


# ---------------------------------------------------------------------------
# 4. source-model attack success rate
# ---------------------------------------------------------------------------

def test_criterion_4_source_asr(fixture_dataset, qub2_model):
    start = time.monotonic()
    xs, ys = pool_of(qub2_model, fixture_dataset, 100, seed=4)
    configs = [
        AttackConfig("FGSM", epsilon=0.1),
        AttackConfig("IFGSM", epsilon=0.1, steps=10),
        AttackConfig("PGD", epsilon=A.PGD_EPSILON, steps=A.PGD_STEPS),
        AttackConfig("JSMA", theta=0.1),
        AttackConfig("LBFGS"),
        AttackConfig("CW", c=100.0),
        AttackConfig("DEEPFOOL"),
    ]
    for cfg in configs:
        flags = [A.run_attack(qub2_model, x, int(y), cfg).success
                 for x, y in zip(xs, ys)]
        rate = X.asr(flags)
        assert rate >= 0.99, f"{cfg.kind}: source ASR {rate}"
    assert time.monotonic() - start < 180


# ---------------------------------------------------------------------------
# 5. boost contracts
# ---------------------------------------------------------------------------

def test_criterion_5_boost_contracts(fixture_dataset, qub2_model):
    xs, ys = pool_of(qub2_model, fixture_dataset, 200, seed=5)
    ac = AttackConfig("IFGSM", epsilon=0.1, steps=10)
    bc = BoostConfig(epsilon=0.1, delta=1.0)
    for x, y in zip(xs, ys):
        res = B.attack_and_boost(qub2_model, x, int(y), ac, bc)
        assert res.final_linf <= 0.1 + 1e-6
        assert np.abs(res.boosted - x).max() <= 0.1 + 1e-6
        if res.reached_delta:
            assert qub2_model.margin01(res.boosted, int(y)) >= 1.0

    # delta = 0 returns the adversarial input bit-exactly
    bc0 = BoostConfig(epsilon=0.1, delta=0.0)
    for x, y in zip(xs[:20], ys[:20]):
        adv = A.run_attack(qub2_model, x, int(y), ac).adversarial
        if qub2_model.predict01(adv) == y:
            continue
        res = B.boost_margin(qub2_model, x, adv, int(y), bc0)
        assert res.iterations == 0
        assert res.boosted.tobytes() == adv.tobytes()


# ---------------------------------------------------------------------------
# 6. transfer improvement under boosting
# ---------------------------------------------------------------------------

def test_criterion_6_transfer_improvement(fixture_dataset, qub2_model, qub1_model):
    start = time.monotonic()
    attack_cfgs = {
        "IFGSM": AttackConfig("IFGSM", epsilon=0.1, steps=10),
        "FGSM": AttackConfig("FGSM", epsilon=0.1),
        "PGD": AttackConfig("PGD", epsilon=0.1, steps=40),
        "JSMA": AttackConfig("JSMA", theta=0.1),
    }
    bc = BoostConfig(epsilon=0.1, delta=1.0)
    base_rates = {k: [] for k in attack_cfgs}
    boost_rates = {k: [] for k in attack_cfgs}
    for seed in range(5):
        xs, ys = pool_of(qub2_model, fixture_dataset, 200, seed=seed)
        for name, cfg in attack_cfgs.items():
            base_flags, boosted_flags = [], []
            for x, y in zip(xs, ys):
                y = int(y)
                raw = A.run_attack(qub2_model, x, y, cfg)
                base_flags.append(qub1_model.predict01(raw.adversarial) != y)
                out = B.attack_and_boost(qub2_model, x, y, cfg, bc)
                boosted_flags.append(qub1_model.predict01(out.boosted) != y)
            base_rates[name].append(X.asr(base_flags))
            boost_rates[name].append(X.asr(boosted_flags))

    above_threshold = 0
    for name in attack_cfgs:
        base_mean = float(np.mean(base_rates[name]))
        boost_mean = float(np.mean(boost_rates[name]))
        assert boost_mean >= base_mean, \
            f"{name}: boosted {boost_mean} < baseline {base_mean}"
        if boost_mean > 0.40:
            above_threshold += 1
    assert above_threshold >= 3
    assert time.monotonic() - start < 600


# ---------------------------------------------------------------------------
# 7. linear-model closed forms
# ---------------------------------------------------------------------------

def test_criterion_7_linear_closed_forms():
    # FGSM
    model = LinearModel(w=[[1.0, -2.0], [0.0, 0.0]])
    x = np.array([[0.5, 0.1]], dtype=np.float32)
    r = A.fgsm(model, x, 0, AttackConfig("FGSM", epsilon=0.2))
    assert np.max(np.abs(r.adversarial - [[0.3, 0.3]])) <= 1e-4

    # DeepFool: one iteration, distance 1.02 * |f| / ||w||_2
    w = np.array([[0.7, -0.2, 0.4], [-0.1, 0.3, 0.2]])
    model = LinearModel(w=w, b=(0.25, 0.0))
    x = np.array([[0.5, 0.5, 0.5]], dtype=np.float32)
    y = model.predict01(x)
    z = model.logits01(x)
    expected = 1.02 * abs(z[1 - y] - z[y]) / np.linalg.norm(w[1 - y] - w[y])
    r = A.deepfool(model, x, y, AttackConfig("DEEPFOOL"))
    assert r.iterations_used == 1
    assert abs(np.linalg.norm((r.adversarial - x).ravel()) - expected) <= 1e-4

    # boost on a 1-D logistic margin m(x) = a*x: fixed accepted steps
    a, step = 5.0, 0.01
    model = LinearModel(w=[[0.0], [a]])
    x_adv = np.array([[0.02]])  # margin 0.1
    res = B.boost_margin(model, np.zeros((1, 1)), x_adv, 0,
                         BoostConfig(epsilon=10.0, delta=0.47, step_size=step))
    k = math.ceil((0.47 - 0.1) / (a * step))
    assert res.reached_delta
    assert abs(res.boosted[0, 0] - (0.02 + k * step)) <= 1e-4


# ---------------------------------------------------------------------------
# 8. determinism and file formats
# ---------------------------------------------------------------------------

def test_criterion_8_determinism_and_formats(tmp_path, small_dataset, small_model):
    # byte-identical checkpoints from identical (seed, config)
    spec = M.build_spec("QUB2", 8, 4)
    again = M.train(spec, small_dataset, M.TrainConfig(seed=0))
    M.save_checkpoint(small_model, tmp_path / "a.ckpt")
    M.save_checkpoint(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    # checkpoint round-trip is bit-exact
    back = M.load_checkpoint(tmp_path / "a.ckpt")
    assert all(np.array_equal(u, v)
               for u, v in zip(back.weights, small_model.weights))

    # dataset round-trip is bit-exact
    D.save_dataset(small_dataset, tmp_path / "d.tlds")
    ds2 = D.load_dataset(tmp_path / "d.tlds")
    assert np.array_equal(ds2.pixels, small_dataset.pixels)
    assert np.array_equal(ds2.labels, small_dataset.labels)
    assert np.array_equal(ds2.splits, small_dataset.splits)

    # byte-identical reports from identical (seed, config)
    reg = ModelRegistry()
    did = small_dataset.dataset_id
    qub1 = M.train(M.build_spec("QUB1", 8, 4), small_dataset, M.TrainConfig(seed=0))
    reg.add_model("QUB2", did, small_model)
    reg.add_model("QUB1", did, qub1)
    reg.add_dataset(small_dataset)
    spec = ScenarioSpec(kind="CROSS_MODEL", source=("QUB2", did),
                        target=("QUB1", did),
                        attack_sweep=(AttackConfig("PGD", epsilon=0.1),),
                        n_samples=10)
    r1 = render_report(run_scenario(spec, reg, seed=9), "csv")
    r2 = render_report(run_scenario(spec, reg, seed=9), "csv")
    assert r1 == r2
    assert parse_report(r1).rows == parse_report(r2).rows

    # corrupted magic and CRC are rejected
    for path, loader in ((tmp_path / "a.ckpt", M.load_checkpoint),
                         (tmp_path / "d.tlds", D.load_dataset)):
        raw = bytearray(path.read_bytes())
        bad_magic = bytearray(raw)
        bad_magic[0] ^= 0xFF
        (tmp_path / "x").write_bytes(bytes(bad_magic))
        with pytest.raises(FormatError):
            loader(tmp_path / "x")
        bad_crc = bytearray(raw)
        bad_crc[-1] ^= 0xFF
        (tmp_path / "x").write_bytes(bytes(bad_crc))
        with pytest.raises(FormatError):
            loader(tmp_path / "x")


# ---------------------------------------------------------------------------
# 9. report schema fidelity
# ---------------------------------------------------------------------------

def test_criterion_9_report_schema():
    row = ReportRow(sn="QUB1:unsw", tn="QUB2:cic", attack="IFGSM eps=0.1",
                    psnr=41.1111, l1=2.004, maxdist=2.549, asr_sn=1.0,
                    asr_tn=0.63, n=500, seed=0)
    report = TransferReport(rows=[row])

    csv_text = render_report(report, "csv")
    lines = csv_text.splitlines()
    assert lines[0] == "sn,tn,attack,psnr,l1,maxdist,asr_sn,asr_tn,n,seed"
    assert lines[0].split(",") == CSV_HEADER
    assert lines[1] == ("QUB1:unsw,QUB2:cic,IFGSM eps=0.1,41.11,2.00,2.55,"
                        "1.0000,0.6300,500,0")

    md = render_report(report, "markdown")
    header = md.splitlines()[0]
    cols = [c.strip() for c in header.strip("|").split("|")]
    assert cols == ["SN", "TN", "Attack Type", "PSNR", "L1 dist", "Max dist",
                    "ASR (SN)", "ASR (TN)"]
    assert "1.0000" in md and "0.6300" in md and "41.11" in md
