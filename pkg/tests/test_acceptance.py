"""Acceptance criteria, one test per criterion, each printing a PASS line
with its runtime.  Run with `pytest -s tests/test_acceptance.py` to see the
per-criterion report."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from harmonykb.checkpoint import load_checkpoint, save_checkpoint
from harmonykb.cli import main as cli_main
from harmonykb.composition import ModelKind
from harmonykb.data import (
    KnownTripletIndex,
    Triplet,
    Vocab,
    build_filter_index,
    generate_synthetic_kb,
)
from harmonykb.evaluation import (
    Query,
    evaluate_split,
    metrics_from_ranks,
    neighborhood_density_study,
    rank_query,
    rank_split,
)
from harmonykb.fourier import circ_correlate, circ_correlate_naive
from harmonykb.harmony import (
    HarmonyParams,
    harmony,
    integrate_dynamics,
    mu,
    score,
    score_gradients,
)
from harmonykb.linalg import symmetrize
from harmonykb.model import triplet_scores
from harmonykb.training import TrainConfig, _batch_loss_and_grads, init_model, train

SANITY = dict(
    n_entities=50, n_relations=5, n_blocks=5, noise=0.05, data_seed=7,
    kind=ModelKind.HHOLE, dim=16, lam=2.0,
    batch_size=64, negatives=50, learning_rate=0.001, train_seed=7,
    max_epochs=100,
)


def report(name: str, started: float, detail: str = ""):
    elapsed = time.perf_counter() - started
    suffix = f"  [{detail}]" if detail else ""
    print(f"\nACCEPTANCE {name}: PASS ({elapsed:.1f}s){suffix}")


def random_within_bound_params(rng, d, lam=None, w_scale=None):
    lam = lam if lam is not None else float(rng.uniform(0.8, 4.0))
    w_scale = w_scale if w_scale is not None else float(rng.uniform(0.2, 0.8))
    w = symmetrize(rng.standard_normal((d, d)))
    w *= w_scale * lam / np.linalg.norm(w)
    b = rng.standard_normal(d)
    return HarmonyParams(W=w, b=b, lam=lam)


@pytest.fixture(scope="module")
def synthetic():
    splits = generate_synthetic_kb(
        SANITY["n_entities"], SANITY["n_relations"], SANITY["n_blocks"],
        SANITY["noise"], SANITY["data_seed"],
    )
    return splits, build_filter_index(splits)


@pytest.fixture(scope="module")
def sanity_run(synthetic):
    """The scaled-down training experiment shared by several criteria."""
    splits, known = synthetic
    cfg = TrainConfig(
        batch_size=SANITY["batch_size"],
        negatives=SANITY["negatives"],
        learning_rate=SANITY["learning_rate"],
        seed=SANITY["train_seed"],
        max_epochs=SANITY["max_epochs"],
        patience=SANITY["max_epochs"],
    )
    started = time.perf_counter()
    result = train(splits, SANITY["kind"], SANITY["dim"], SANITY["dim"], SANITY["lam"], cfg)
    return result, time.perf_counter() - started


def test_correlation_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(101)
    dims = [2, 4, 8, 16, 32, 64]
    pairs_per_dim = 1000 // len(dims) + 1
    checked = 0
    for d in dims:
        for _ in range(pairs_per_dim):
            a = rng.standard_normal(d)
            b = rng.standard_normal(d)
            diff = np.max(np.abs(circ_correlate(a, b) - circ_correlate_naive(a, b)))
            assert diff <= 1e-10 * (1 + np.linalg.norm(a) * np.linalg.norm(b))
            checked += 1
    elapsed = time.perf_counter() - started
    assert checked >= 1000
    assert elapsed < 10.0
    report("correlation-oracle", started, f"{checked} pairs")


def test_closed_form_optimality():
    started = time.perf_counter()
    rng = np.random.default_rng(102)
    for _ in range(200):
        d = int(rng.integers(2, 17))
        p = random_within_bound_params(rng, d)
        x = rng.standard_normal(d)
        opt = mu(x, p)
        grad = (p.W - p.lam * np.eye(d)) @ opt + 0.5 * p.b + p.lam * x
        assert np.max(np.abs(grad)) <= 1e-8
        best = harmony(opt, x, p)
        for _ in range(100):
            delta = rng.standard_normal(d)
            delta *= 1e-2 / np.linalg.norm(delta)
            assert harmony(opt + delta, x, p) < best
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0
    report("closed-form-optimality", started, "200 params x 100 probes")


def test_dynamics_agreement():
    started = time.perf_counter()
    rng = np.random.default_rng(103)
    for _ in range(100):
        d = int(rng.integers(2, 17))
        p = random_within_bound_params(rng, d, w_scale=float(rng.uniform(0.2, 0.7)))
        x = rng.standard_normal(d)
        step = 0.1 / (p.lam + float(np.linalg.norm(p.W)))
        h, steps = integrate_dynamics(x, p, np.zeros(d), step=step, tol=1e-13, max_steps=100_000)
        assert steps <= 100_000
        assert np.max(np.abs(h - mu(x, p))) <= 1e-9
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0
    report("dynamics-agreement", started, "100 instances")


def test_gradient_suite():
    started = time.perf_counter()
    rng = np.random.default_rng(104)

    # analytic score gradients vs central finite differences
    for lam in (1.5, None):
        d = 8
        if lam is None:
            p = HarmonyParams(W=symmetrize(rng.standard_normal((d, d))), b=rng.standard_normal(d), lam=None)
        else:
            p = random_within_bound_params(rng, d, lam=lam)
        x = rng.standard_normal(d)
        gx, gw, gb = score_gradients(x, p)
        eps = 1e-5
        for i in range(d):
            bump = np.zeros(d)
            bump[i] = eps
            num = (score(x + bump, p) - score(x - bump, p)) / (2 * eps)
            assert abs(num - gx[i]) <= 1e-4 * (1 + abs(num))
            pp = HarmonyParams(W=p.W, b=p.b + bump, lam=lam)
            pm = HarmonyParams(W=p.W, b=p.b - bump, lam=lam)
            num = (score(x, pp) - score(x, pm)) / (2 * eps)
            assert abs(num - gb[i]) <= 1e-4 * (1 + abs(num))
        for i in range(d):
            for j in range(d):
                dw = np.zeros((d, d))
                dw[i, j] = eps
                pp = HarmonyParams(W=p.W + dw, b=p.b, lam=lam)
                pm = HarmonyParams(W=p.W - dw, b=p.b, lam=lam)
                num = (score(x, pp) - score(x, pm)) / (2 * eps)
                assert abs(num - gw[i, j]) <= 1e-4 * (1 + abs(num))

    # end-to-end loss gradients for every model kind and both lam modes
    cases = [(ModelKind.DISTMULT, [None]), (ModelKind.HOLE, [None])]
    cases += [(k, [2.0, None]) for k in (ModelKind.HDISTMULT, ModelKind.HHOLE, ModelKind.HTPR)]
    vocab = Vocab.from_names([f"e{i}" for i in range(5)], ["r0", "r1"])
    pos = np.array([[0, 0, 1], [2, 1, 3]])
    negs = np.array([[[4, 0, 1], [0, 0, 3]], [[2, 1, 0], [1, 1, 3]]])
    cfg = TrainConfig()
    eps = 1e-6
    for kind, lams in cases:
        for lam in lams:
            d_e, d_r = (2, 2) if kind is ModelKind.HTPR else (8, 8)
            model = init_model(kind, d_e, d_r, lam, vocab, seed=4)
            if not kind.is_baseline:
                d_h = model.d_hidden
                w = symmetrize(rng.standard_normal((d_h, d_h)))
                if lam is not None:
                    w *= 0.4 * lam / np.linalg.norm(w)
                model = replace(model, W=w, b=rng.standard_normal(d_h) * 0.3)

            def total_loss(m):
                loss, _ = _batch_loss_and_grads(
                    m, pos[:, 0], pos[:, 1], pos[:, 2], negs[:, :, 0], negs[:, :, 2], cfg
                )
                return loss

            _, grads = _batch_loss_and_grads(
                model, pos[:, 0], pos[:, 1], pos[:, 2], negs[:, :, 0], negs[:, :, 2], cfg
            )
            for field in ("entities", "relations") + (() if kind.is_baseline else ("W", "b")):
                base = getattr(model, field)
                gflat = np.asarray(grads[field]).reshape(-1)
                idx = rng.choice(base.size, size=min(6, base.size), replace=False)
                for i in idx:
                    vals = []
                    for sign in (+1, -1):
                        bumped = base.copy().reshape(-1)
                        bumped[i] += sign * eps
                        vals.append(total_loss(replace(model, **{field: bumped.reshape(base.shape)})))
                    num = (vals[0] - vals[1]) / (2 * eps)
                    assert abs(num - gflat[i]) <= 1e-4 * (1 + abs(num)), (kind, lam, field)
    elapsed = time.perf_counter() - started
    assert elapsed < 120.0
    report("gradient-suite", started, "score + end-to-end, all kinds, both modes")


def test_two_route_score_identity():
    started = time.perf_counter()
    rng = np.random.default_rng(105)
    for _ in range(1000):
        d = int(rng.integers(2, 17))
        p = random_within_bound_params(rng, d)
        x = rng.standard_normal(d)
        fast = score(x, p)
        direct = harmony(mu(x, p), x, p)
        assert abs(fast - direct) <= 1e-9 * (1 + abs(direct))
    report("two-route-score-identity", started, "1000 instances")


def test_lambda_limit_checks():
    started = time.perf_counter()
    rng = np.random.default_rng(106)
    for _ in range(10):
        d = int(rng.integers(2, 13))
        w = symmetrize(rng.standard_normal((d, d)))
        w /= np.linalg.norm(w)  # ||W||_F = 1
        x = rng.standard_normal(d)
        prev = np.inf
        for lam in np.geomspace(1.1, 1e6, 40):
            p = HarmonyParams(W=w, b=np.zeros(d), lam=float(lam))
            dist = float(np.linalg.norm(mu(x, p) - x))
            assert dist <= prev + 1e-12
            prev = dist
        p = HarmonyParams(W=w, b=np.zeros(d), lam=1e6)
        grad = p.lam * (mu(x, p) - x)
        target = w @ x + 0.5 * p.b
        assert np.max(np.abs(grad - target)) <= 1e-3 * (1 + np.linalg.norm(x))
    report("lambda-limit-checks", started)


def _oracle_rank(q, model, known):
    n = model.n_entities
    rows = []
    for eid in range(n):
        t = (
            Triplet(eid, q.known.rel, q.known.right)
            if q.missing_side == "left"
            else Triplet(q.known.left, q.known.rel, eid)
        )
        rows.append((eid, t, float(triplet_scores(model, [t.left], [t.rel], [t.right])[0])))
    true_id = q.true_entity
    true_score = next(s for eid, _, s in rows if eid == true_id)
    kept = [(eid, s) for eid, t, s in rows if eid == true_id or t not in known]
    greater = sum(1 for _, s in kept if s > true_score)
    ties = sum(1 for _, s in kept if s == true_score)
    return math.floor((greater + 1 + greater + ties) / 2)


def test_ranking_oracle():
    started = time.perf_counter()
    rng = np.random.default_rng(107)
    kinds = [
        (ModelKind.DISTMULT, None),
        (ModelKind.HOLE, None),
        (ModelKind.HDISTMULT, 2.0),
        (ModelKind.HHOLE, 2.0),
        (ModelKind.HHOLE, None),
    ]
    checked = 0
    trial = 0
    while checked < 500:
        kind, lam = kinds[trial % len(kinds)]
        trial += 1
        n_e = int(rng.integers(4, 21))
        d = 4
        vocab = Vocab.from_names([f"e{i}" for i in range(n_e)], ["r0", "r1"])
        model = init_model(kind, d, d, lam, vocab, seed=trial)
        if not kind.is_baseline:
            w = symmetrize(rng.standard_normal((d, d)))
            if lam is not None:
                w *= 0.5 * lam / np.linalg.norm(w)
            model = replace(model, W=w, b=rng.standard_normal(d) * 0.2)
        # engineered ties through duplicated entity embeddings
        ents = model.entities.copy()
        if n_e >= 6:
            ents[1] = ents[0]
            ents[4] = ents[3]
        model = replace(model, entities=ents)
        facts = [
            Triplet(int(rng.integers(n_e)), int(rng.integers(2)), int(rng.integers(n_e)))
            for _ in range(8)
        ]
        known = KnownTripletIndex(facts)
        for t in facts[:2]:
            for side in ("left", "right"):
                q = Query(t, side)
                assert rank_query(q, model, known) == _oracle_rank(q, model, known)
                checked += 1
        # aggregate sanity: Hits@N monotone on every report
        m = metrics_from_ranks([r.rank for r in rank_split(facts[:4], model, known)])
        assert m.hits[1] <= m.hits[3] <= m.hits[10]
    report("ranking-oracle", started, f"{checked} queries incl. engineered ties")


def test_training_sanity(synthetic, sanity_run):
    started = time.perf_counter()
    splits, known = synthetic
    result, train_seconds = sanity_run

    untrained = init_model(
        SANITY["kind"], SANITY["dim"], SANITY["dim"], SANITY["lam"],
        splits.vocab, SANITY["train_seed"],
    )
    base = evaluate_split(splits.test, untrained, known)
    trained = evaluate_split(splits.test, result.best, known)

    assert train_seconds < 600.0, f"training took {train_seconds:.0f}s"
    assert base.mrr <= 0.15, f"untrained MRR {base.mrr:.3f}"
    assert trained.mrr >= 0.5, f"trained MRR {trained.mrr:.3f}"
    assert trained.hits[10] >= 0.9, f"trained Hits@10 {trained.hits[10]:.3f}"
    report(
        "training-sanity", started,
        f"MRR {trained.mrr:.3f} vs untrained {base.mrr:.3f}, "
        f"Hits@10 {trained.hits[10]:.3f}, train {train_seconds:.0f}s",
    )


def test_trend_finite_vs_infinite(synthetic):
    started = time.perf_counter()
    splits, known = synthetic
    rows = []
    for seed in (1, 2, 3):
        mrrs = {}
        for lam in (SANITY["lam"], None):
            cfg = TrainConfig(
                batch_size=SANITY["batch_size"],
                negatives=SANITY["negatives"],
                learning_rate=SANITY["learning_rate"],
                seed=seed,
                max_epochs=60,
                patience=60,
            )
            result = train(splits, SANITY["kind"], SANITY["dim"], SANITY["dim"], lam, cfg)
            key = "inf" if lam is None else "finite"
            mrrs[key] = evaluate_split(splits.test, result.best, known).mrr
        rows.append((seed, mrrs["finite"], mrrs["inf"]))
    detail = "; ".join(f"seed {s}: finite {f:.3f} inf {i:.3f}" for s, f, i in rows)
    print(f"\nACCEPTANCE trend raw numbers: {detail}")
    for seed, finite, inf in rows:
        assert finite >= inf - 0.02, f"seed {seed}: finite {finite:.3f} < inf {inf:.3f} - 0.02"
    report("trend-finite-vs-infinite", started, detail)


def test_density_sign_check(synthetic, sanity_run):
    started = time.perf_counter()
    splits, known = synthetic
    result, _ = sanity_run
    model = result.best

    rng = np.random.default_rng(11)
    pool = splits.all_triplets()
    pos_idx = rng.choice(len(pool), size=200, replace=False)
    labeled = [(pool[i], "pos") for i in pos_idx]
    negs = []
    while len(negs) < 200:
        base = pool[int(rng.integers(0, len(pool)))]
        side = int(rng.integers(0, 2))
        repl = int(rng.integers(0, model.n_entities))
        cand = (
            Triplet(repl, base.rel, base.right) if side == 0 else Triplet(base.left, base.rel, repl)
        )
        if cand not in known:
            negs.append(cand)
    labeled += [(t, "neg") for t in negs]
    rep = neighborhood_density_study(labeled, model, known, k=5)
    assert rep.delta_density_pos > rep.delta_density_neg, (
        rep.delta_density_pos, rep.delta_density_neg,
    )
    report(
        "density-sign-check", started,
        f"pos {rep.delta_density_pos:+.4f} > neg {rep.delta_density_neg:+.4f}",
    )


def test_determinism_byte_identical(tmp_path):
    started = time.perf_counter()
    data = tmp_path / "data"
    assert cli_main([
        "synth", "--entities", "25", "--relations", "3", "--blocks", "5",
        "--noise", "0.05", "--seed", "7", "--out", str(data),
    ]) == 0
    run_dirs = []
    for i in range(2):
        out = tmp_path / f"train{i}"
        assert cli_main([
            "train", "--data", str(data), "--model", "hhole", "--dim", "8",
            "--lambda", "2.0", "--batch-size", "32", "--negatives", "10",
            "--epochs", "4", "--patience", "10", "--seed", "5",
            "--deterministic", "1", "--out", str(out),
        ]) == 0
        eval_out = tmp_path / f"eval{i}"
        assert cli_main([
            "eval", "--checkpoint", str(out / "checkpoint.ggrf"), "--data", str(data),
            "--split", "test", "--out", str(eval_out),
        ]) == 0
        run_dirs.append((out, eval_out))
    (t0, e0), (t1, e1) = run_dirs
    assert (t0 / "checkpoint.ggrf").read_bytes() == (t1 / "checkpoint.ggrf").read_bytes()
    assert (e0 / "metrics.tsv").read_bytes() == (e1 / "metrics.tsv").read_bytes()
    assert (e0 / "query_ranks.jsonl").read_bytes() == (e1 / "query_ranks.jsonl").read_bytes()
    report("determinism", started, "checkpoints and metrics reports byte-identical")


def test_checkpoint_round_trip_metrics(synthetic, sanity_run, tmp_path):
    started = time.perf_counter()
    splits, known = synthetic
    result, _ = sanity_run
    model = result.best
    direct = evaluate_split(splits.test, model, known)
    path = tmp_path / "sanity.ggrf"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    reloaded = evaluate_split(splits.test, loaded, known)
    assert direct.mean_rank == reloaded.mean_rank
    assert direct.mrr == reloaded.mrr
    assert direct.hits == reloaded.hits
    report("checkpoint-round-trip", started, f"MRR {reloaded.mrr:.4f} reproduced exactly")
