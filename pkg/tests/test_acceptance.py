"""Acceptance criteria 1-10.

Each test prints (and records for the terminal summary) one line
``criterion N: PASS|FAIL <details>`` before asserting.
"""

import time
from fractions import Fraction

import numpy as np

import gradcheck as G
from havana.cli import main
from havana.cloud import PointCloud, extract_sphere, grid_subsample, load_cloud, save_cloud
from havana.clustering import kmeans
from havana.contrastive import MiningConfig, PairSet, contrastive_loss, mine_negatives
from havana.encoder import EncoderConfig, build_input_features, forward, init_head, init_params, neighbor_lists
from havana.evaluation import confusion, error_map, metrics
from havana.features import compute_features, covariance, eigendecompose_sym3, features_from_eigen
from havana.spatial import build_index
from havana.synth import SceneSpec, synthesize
from havana.trainer import (
    Checkpoint,
    TrainConfig,
    finetune,
    load_checkpoint,
    mining_stats,
    predict_with_voting,
    pretrain,
    save_checkpoint,
)
from oracles import brute_knn, brute_radius, bucket_grid, isotropic_ball, oracle_negative, ring_disc

REPORT = []


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    REPORT.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_fidelity():
    t0 = time.time()
    pre, pre_worst, pre_log = G.check(G.pretrain_problem(0))
    fin, fin_worst, fin_log = G.check(G.finetune_problem(0))
    elapsed = time.time() - t0
    n_params = sum(v.size for v in G.finetune_problem(0).params.values())
    ok = pre < G.TOL and fin < G.TOL and elapsed < 120
    report(1, ok, f"max rel err pretrain {pre:.2e} finetune {fin:.2e} over {n_params} entries "
                  f"(tol {G.TOL:g}; {len(pre_log) + len(fin_log)} re-measured) in {elapsed:.0f}s")


def test_criterion_02_feature_oracles():
    disc = ring_disc()
    fd = compute_features(disc, neighbor_count=len(disc))
    line = np.stack([np.zeros(50), np.zeros(50), np.linspace(0, 5, 50)], axis=1)
    fl = compute_features(line, neighbor_count=20)
    variations = []
    for seed in range(5):
        r = eigendecompose_sym3(covariance(isotropic_ball(500, seed), 0, 500))
        variations.append(features_from_eigen(r.lambdas[None], r.eigvecs[None])[1][0])
    checks = {
        "disc planarity": np.abs(fd.planarity - 1).max() < 1e-9,
        "disc variation": np.abs(fd.surface_variation).max() < 1e-9,
        "disc verticality": np.abs(fd.verticality).max() < 1e-9,
        "line planarity": np.abs(fl.planarity).max() < 1e-9,
        "line verticality": np.abs(fl.verticality - 1).max() < 1e-9,
        "ball variation": max(abs(v - 1 / 3) for v in variations) < 0.02,
    }
    bad = [k for k, v in checks.items() if not v]
    report(2, not bad, f"ball variation {min(variations):.4f}..{max(variations):.4f}" + (f" failing {bad}" if bad else ""))


def test_criterion_03_loss_zero_cases():
    rng = np.random.default_rng(0)
    cfg = MiningConfig()
    assert cfg.t_p == 0.2 and cfg.t_n == 2.0
    v1 = rng.normal(size=(40, 8))
    step = rng.normal(size=(40, 8))
    v2 = v1 + 0.19 * step / np.linalg.norm(step, axis=1, keepdims=True)
    v1[20:] += 10.0  # second halves sit far from every first-half point
    v2[20:] += 10.0
    pos = np.stack([np.arange(40)] * 2, axis=1)
    a = np.arange(20)
    pairs = PairSet(pos, a, a + 20, np.ones(20, bool), a, a + 20, np.ones(20, bool))
    loss, g1, g2 = contrastive_loss(v1, v2, pairs, cfg)
    zero = loss == 0.0 and not g1.any() and not g2.any()
    one_pos = PairSet(np.array([[0, 0]]), *([np.zeros(0, np.int64)] * 2), np.zeros(0, bool),
                      *([np.zeros(0, np.int64)] * 2), np.zeros(0, bool))
    hand1 = contrastive_loss(np.array([[0.0, 0]]), np.array([[1.2, 0]]), one_pos, cfg)[0]
    neg = PairSet(np.array([[0, 0]]), np.array([0]), np.array([1]), np.array([True]),
                  np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, bool))
    hand2 = contrastive_loss(np.zeros((1, 2)), np.array([[0.0, 0], [1.0, 0]]), neg, cfg)[0]
    want1 = (1.2 - 0.2) ** 2 / 1
    ok = zero and hand1 == want1 and abs(hand1 - 1.0) < 1e-15 and hand2 == 0.5 * (2.0 - 1.0) ** 2
    report(3, ok, f"zero-case loss {float(loss)!r}, hand cases {float(hand1)!r} and {float(hand2)!r}")


def test_criterion_04_mining_purity():
    cloud = grid_subsample(synthesize(SceneSpec())[0], 0.4)
    cfg = TrainConfig()
    wins, exact, rows = 0, True, []
    for seed in range(10):
        a, h = mining_stats(cloud, seed, cfg)
        wins += a["frac_same_true_label"] < h["frac_same_true_label"]
        i, j = a["pairs"].valid_negatives()
        pseudo = a["pseudo"].assignment
        n1 = len(a["truth"][0])
        exact &= bool(len(i) > 0 and np.all(pseudo[i] != pseudo[n1 + j]))
        rows.append(f"{a['frac_same_true_label']:.3f}<{h['frac_same_true_label']:.3f}")
    report(4, wins >= 8 and exact, f"abspan below hardest in {wins}/10 seeds, pseudo labels differ "
                                   f"on every abspan pair: {exact} [{' '.join(rows)}]")


def test_criterion_06_metric_exactness():
    met = metrics(np.array([[8, 4], [2, 6]]))
    p, r = 8 / (8 + 2), 8 / (8 + 4)
    hand = (met.precision[0] == p and met.recall[0] == r and met.f1[0] == 2 * p * r / (p + r)
            and abs(Fraction(met.f1[0]) - Fraction(8, 11)) < Fraction(1, 10**15)
            and met.oa == 14 / 20)
    diag = metrics(np.diag([5, 5]))
    hand &= diag.oa == 1.0 and list(diag.f1) == [1.0, 1.0]
    absent = metrics(np.array([[3, 0, 0], [1, 4, 0], [0, 0, 0]]))
    hand &= absent.f1[2] == 0.0
    rng = np.random.default_rng(6)
    flags_ok = True
    for _ in range(20):
        n = int(rng.integers(1, 500))
        t, pr = rng.integers(0, 5, n), rng.integers(0, 5, n)
        m = confusion(pr, t, 5)
        flags = error_map(pr, t, PointCloud(np.zeros((n, 3)))).extra["correct"]
        flags_ok &= metrics(m).oa == flags.mean() and flags.sum() == np.trace(m)
    report(6, bool(hand and flags_ok), f"hand matrices exact: {bool(hand)}, OA = mean flag and "
                                       f"flag sum = trace on 20 random cases: {bool(flags_ok)}")


def _run_twice(tmp_path, name, argv_for):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / f"{name}_{run}"
        d.mkdir()
        argv, produced = argv_for(d)
        assert main([str(x) for x in argv]) == 0, (name, argv)
        outs.append(b"".join(open(p, "rb").read() for p in produced(d)))
    return outs[0] == outs[1]


def test_criterion_07_determinism(tmp_path):
    small = ["--extent", "20", "20", "--buildings", "1", "--trees", "2", "--poles", "2", "--cars", "1"]
    fast = ["--iters", "2", "--batch", "1", "--radius", "5"]
    base = tmp_path / "inputs"
    base.mkdir()
    scene = base / "scene.xyz"
    assert main(["synth", "--seed", "3", "--out", str(scene), *small]) == 0
    unl = base / "unl"
    unl.mkdir()
    for s in (4, 5):
        assert main(["synth", "--seed", str(s), "--out", str(unl / f"{s}.xyz"), *small]) == 0
    pre = base / "pre.hvna"
    assert main(["pretrain", "--data", str(unl), "--out", str(pre), *fast, "--n-positive", "256",
                 "--n-negative", "128"]) == 0
    tuned = base / "ft.hvna"
    assert main(["finetune", "--init", str(pre), "--data", str(scene), "--fraction", "0.1", "--classes", "6",
                 "--out", str(tuned), *fast]) == 0
    pred = base / "pred.xyz"
    assert main(["predict", "--model", str(tuned), "--in", str(scene), "--out", str(pred), "--votes", "2"]) == 0

    def files(*names):
        return lambda d: [d / n for n in names]

    cases = {
        "synth": lambda d: (["synth", "--seed", 3, "--out", d / "s.xyz", *small],
                            files("s.xyz", "s.xyz.manifest.txt")),
        "features": lambda d: (["features", "--in", scene, "--out", d / "f.csv"], files("f.csv")),
        "cluster": lambda d: (["cluster", "--in", scene, "--out", d / "c.csv", "--seed", 2],
                              files("c.csv", "c.csv.centroids.csv")),
        "pretrain": lambda d: (["pretrain", "--data", unl, "--out", d / "p.hvna", *fast, "--n-positive", 256,
                                "--n-negative", 128, "--threads", 2], files("p.hvna")),
        "finetune": lambda d: (["finetune", "--init", pre, "--data", scene, "--fraction", 0.1, "--classes", 6,
                                "--out", d / "f.hvna", *fast], files("f.hvna")),
        "predict": lambda d: (["predict", "--model", tuned, "--in", scene, "--out", d / "p.xyz", "--votes", 2],
                              files("p.xyz")),
        "evaluate": lambda d: (["evaluate", "--pred", pred, "--truth", scene, "--out-dir", d / "ev"],
                               files("ev/metrics.csv", "ev/error_map.xyz")),
        "mine-stats": lambda d: (["mine-stats", "--data", scene, "--seeds", 2, "--radius", 5,
                                  "--out", d / "m.csv"], files("m.csv")),
    }
    same = {name: _run_twice(tmp_path, name.replace("-", "_"), fn) for name, fn in cases.items()}
    bad = [k for k, v in same.items() if not v]
    report(7, not bad, f"{len(same) - len(bad)}/{len(same)} subcommands bitwise identical across runs"
                       + (f"; differing: {bad}" if bad else ""))


def test_criterion_08_brute_force_equivalence():
    rng = np.random.default_rng(8)
    pts = np.round(rng.uniform(0, 4, (300, 3)), 2)  # rounding creates exact distance ties
    idx = build_index(pts)
    knn_ok = all(idx.knn(q, k).tolist() == brute_knn(pts, q, k)
                 for q in np.round(rng.uniform(0, 4, (40, 3)), 2) for k in (1, 8, 20))
    rad_ok = all(idx.radius(q, r).tolist() == brute_radius(pts, q, r)
                 for q in np.round(rng.uniform(0, 4, (40, 3)), 2) for r in (0.0, 0.3, 1.0))
    cloud = PointCloud(pts, labels=rng.integers(0, 3, 300))
    sph_ok = True
    for c in rng.uniform(0, 4, (30, 3)):
        got = set(extract_sphere(cloud, idx, c, 1.2).indices.tolist())
        sph_ok &= got == set(brute_radius(pts, c, 1.2))

    neg_ok = True
    v1, v2 = rng.normal(size=(250, 6)), rng.normal(size=(250, 6))
    l1, l2 = rng.integers(0, 4, 250), rng.integers(0, 4, 250)
    pos = np.stack([np.arange(250), rng.permutation(250)], axis=1)
    for strategy in ("abspan", "hardest"):
        pairs = mine_negatives(v1, v2, pos, (l1, l2), MiningConfig(strategy=strategy), np.random.default_rng(1))
        filtered = strategy == "abspan"
        for a, j, k, ok in zip(pairs.neg1_anchor, pairs.neg2_anchor, pairs.neg1_k, pairs.neg1_valid):
            want = oracle_negative(v1, v2, a, j, {l2[j], l1[a]}, l2, filtered)
            neg_ok &= (want is None) == (not ok) and (not ok or k == want)
        for b, i, k, ok in zip(pairs.neg2_anchor, pairs.neg1_anchor, pairs.neg2_k, pairs.neg2_valid):
            want = oracle_negative(v2, v1, b, i, {l1[i], l2[b]}, l1, filtered)
            neg_ok &= (want is None) == (not ok) and (not ok or k == want)

    grid = grid_subsample(cloud, 0.4)
    oracle = bucket_grid(cloud, 0.4)
    keys = [tuple(int(v) for v in np.floor(p / 0.4)) for p in grid.positions]
    grid_ok = set(keys) == set(oracle) and len(keys) == len(oracle)
    for key, p, lab in zip(keys, grid.positions, grid.labels):
        grid_ok &= lab == oracle[key][1] and np.abs(p - oracle[key][0]).max() < 1e-12
    checks = {"knn": knn_ok, "radius": rad_ok, "sphere": sph_ok, "hardest negative": neg_ok, "grid": grid_ok}
    bad = [k for k, v in checks.items() if not v]
    report(8, not bad, "knn, radius, sphere, constrained hardest negative and grid match exhaustive "
                       "oracles on 250-300 point clouds" + (f"; failing {bad}" if bad else ""))


def test_criterion_09_kmeans():
    mono = True
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=(300, 4))
        for k in (2, 5, 9):
            h = kmeans(x, k, seed=seed).inertia_history
            mono &= all(b <= a for a, b in zip(h, h[1:]))
    recovered = 0
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        sizes = rng.integers(20, 80, 3)
        centers = rng.normal(size=(3, 4)) * 50
        truth = np.repeat(np.arange(3), sizes)
        x = centers[truth] + rng.normal(size=(len(truth), 4))
        a = kmeans(x, 3, seed=seed).assignment
        mapping = {(int(t), int(c)) for t, c in zip(truth, a)}
        recovered += len(mapping) == 3 and len({c for _, c in mapping}) == 3
    report(9, mono and recovered == 10, f"inertia monotone on 30 runs: {mono}; exact K=3 recovery on "
                                        f"{recovered}/10 seeds")


def test_criterion_10_round_trips(tmp_path):
    cfg = EncoderConfig()
    ck = Checkpoint(encoder=init_params(cfg, 3), head=init_head(6, 4), config=TrainConfig().to_dict())
    path = tmp_path / "m.hvna"
    save_checkpoint(ck, path)
    back = load_checkpoint(path)
    params_ok = all(np.array_equal(back.encoder[k], ck.encoder[k]) for k in ck.encoder) and all(
        np.array_equal(back.head[k], ck.head[k]) for k in ck.head)
    rng = np.random.default_rng(10)
    cloud = PointCloud(rng.uniform(0, 5, (200, 3)), intensity=rng.random(200), return_count=rng.integers(1, 4, 200))
    block = extract_sphere(cloud, build_index(cloud), np.full(3, 2.5), 2.0)
    x = build_input_features(block, cfg)
    nb = neighbor_lists(block.local_positions, cfg.aggregation_k)
    emb_ok = np.array_equal(forward(x, ck.encoder, nb)[0], forward(x, back.encoder, nb)[0])

    mags = 10.0 ** rng.uniform(-6, 6, (500, 3)) * rng.choice([-1, 1], (500, 3))
    text_cloud = PointCloud(mags, labels=rng.integers(0, 6, 500))
    xyz = tmp_path / "c.xyz"
    save_cloud(text_cloud, xyz)
    again = load_cloud(xyz)
    digits_ok = all(f"{a:.9g}" == f"{b:.9g}" for a, b in zip(mags.ravel(), again.positions.ravel()))
    digits_ok &= np.array_equal(again.labels, text_cloud.labels)
    report(10, bool(params_ok and emb_ok and digits_ok),
           f"checkpoint tensors bitwise: {params_ok}; embeddings identical: {bool(emb_ok)}; "
           f"xyz 9 significant digits on 1500 values: {bool(digits_ok)}")


# ---------------------------------------------------------------------------
# criterion 5 last: it is by far the slowest

SSL = dict(
    n_unlabeled=10,
    radius=5.0,
    pretrain_lr=0.01,
    pretrain_iters=500,
    finetune_lr=0.01,
    finetune_iters=200,
    votes=3,
    mining=dict(n_positive=1024, n_negative_anchors=512),
    test_scene=dict(seed=999, extent=(30.0, 30.0), n_buildings=2, n_trees=4, n_poles=3, n_cars=3),
)


def test_criterion_05_ssl_benefit():
    t0 = time.time()
    unlabeled = [synthesize(SceneSpec(seed=100 + i))[0] for i in range(SSL["n_unlabeled"])]
    mining = MiningConfig(**SSL["mining"])
    pre = pretrain(unlabeled, TrainConfig(radius=SSL["radius"], learning_rate=SSL["pretrain_lr"], batch_blocks=1,
                                          iterations_per_epoch=SSL["pretrain_iters"], seed=0, mining=mining))
    train = synthesize(SceneSpec(seed=500))[0]
    test = synthesize(SceneSpec(**SSL["test_scene"]))[0]
    gaps = {0.1: [], 1.0: []}
    for fraction in gaps:
        for seed in range(10):
            oa = []
            for init in (pre, None):
                cfg = TrainConfig(radius=SSL["radius"], learning_rate=SSL["finetune_lr"], batch_blocks=1,
                                  iterations_per_epoch=SSL["finetune_iters"], seed=seed,
                                  label_fraction=fraction, n_classes=6)
                pred = predict_with_voting(finetune(init, [train], cfg), test, votes=SSL["votes"])
                oa.append(metrics(confusion(pred.labels, test.labels, 6)).oa)
            gaps[fraction].append(oa[0] - oa[1])
    elapsed = time.time() - t0
    wins = sum(g >= 0 for g in gaps[0.1])
    mean10, mean100 = float(np.mean(gaps[0.1])), float(np.mean(gaps[1.0]))
    ok = wins >= 7 and mean10 >= mean100 and elapsed < 900
    report(5, ok, f"pre-trained >= scratch OA in {wins}/10 seeds at 10% labels; mean OA gap "
                  f"{mean10:+.3f} (10%) vs {mean100:+.3f} (100%); {elapsed:.0f}s")
