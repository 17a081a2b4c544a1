"""Acceptance checklist: twelve gate criteria, one printed verdict line each.

Run `pytest tests/test_acceptance.py -v -s` to see the verdict lines. Every
oracle used here is coded independently of the library (textbook formulas,
quadratic-time rescans, high-precision decimal arithmetic) so agreement is
evidence, not circularity.
"""

import decimal
import filecmp
import json
import math
import time
from datetime import date, timedelta

import numpy as np
import pytest

from incidentkit import analytics as an
from incidentkit import cli
from incidentkit import dataset as ds
from incidentkit import evaluation as ev
from incidentkit import model as md
from incidentkit import taxonomy as tx
from incidentkit import trainer
from incidentkit.config import GeoConfig
from incidentkit.dedup import DedupConfig, dedup
from incidentkit.synth import SynthSpec, generate, temporal_scenario


def _verdict(num: int, ok: bool, detail: str) -> None:
    print(f"\ncriterion {num:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {num:02d}: {detail}"


# ------------------------------------------------------------ 1: gradients


def _central_diff(f, x, h=1e-4):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, out = x.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return g


def _max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def test_criterion_01_analytic_gradients_match_finite_differences():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, n_configs = 0.0, 0
    for _ in range(60):  # masked binary loss
        b, n = int(rng.integers(1, 6)), int(rng.integers(1, 9))
        x = rng.normal(scale=3.0, size=(b, n))
        y = rng.integers(0, 2, size=(b, n)).astype(np.float64)
        w = rng.integers(0, 2, size=(b, n)).astype(np.float64)
        out = md.cn_loss(x, y, w)
        assert np.all(out.grad_logits[w == 0.0] == 0.0)
        num = _central_diff(lambda v: md.cn_loss(v, y, w).value, x)
        worst = max(worst, _max_rel_err(out.grad_logits, num))
        n_configs += 1
    for _ in range(60):  # softmax loss with row masking
        b, n = int(rng.integers(1, 6)), int(rng.integers(2, 9))
        x = rng.normal(scale=3.0, size=(b, n))
        idx = rng.integers(0, n, size=b)
        mask = rng.integers(0, 2, size=b).astype(np.float64)
        out = md.ce_loss(x, idx, mask)
        assert np.all(out.grad_logits[mask == 0.0] == 0.0)
        num = _central_diff(lambda v: md.ce_loss(v, idx, mask).value, x)
        worst = max(worst, _max_rel_err(out.grad_logits, num))
        n_configs += 1
    elapsed = time.perf_counter() - t0
    ok = n_configs >= 100 and worst < 1e-4 and elapsed < 10.0
    _verdict(1, ok, f"{n_configs} configs, worst rel err {worst:.2e}, "
                    f"masked coords exactly 0, {elapsed:.2f}s")


# ------------------------------------------------- 2: masking invariance


def test_criterion_02_masked_logits_cannot_move_the_loss():
    rng = np.random.default_rng(202)
    trials = 0
    for _ in range(1000):
        b, n = int(rng.integers(1, 5)), int(rng.integers(1, 10))
        x = rng.normal(scale=4.0, size=(b, n))
        y = rng.integers(0, 2, size=(b, n)).astype(np.float64)
        w = rng.integers(0, 2, size=(b, n)).astype(np.float64)
        base = md.cn_loss(x, y, w)
        bump = np.where(w == 0.0, rng.choice([-10.0, 10.0], size=(b, n)), 0.0)
        pert = md.cn_loss(x + bump, y, w)
        assert pert.value == base.value  # bitwise
        assert np.array_equal(pert.grad_logits, base.grad_logits)
        trials += 1
    _verdict(2, trials == 1000,
             f"{trials} trials bitwise-identical under +/-10 masked perturbations")


# ----------------------------------------------------- 3: BCE equivalence


def _reference_bce(logits, targets):
    """Binary cross-entropy straight from the definition, evaluated in
    50-digit decimal arithmetic so the reference itself cannot cancel."""
    with decimal.localcontext() as ctx:
        ctx.prec = 50
        one = decimal.Decimal(1)
        total = decimal.Decimal(0)
        for x, y in zip(logits, targets):
            p = one / (one + (-decimal.Decimal(x)).exp())
            total -= decimal.Decimal(y) * p.ln() + (one - decimal.Decimal(y)) * (one - p).ln()
        return float(total)


def test_criterion_03_fully_supervised_loss_matches_textbook_bce():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        x = rng.uniform(-30.0, 30.0, size=n)
        y = rng.integers(0, 2, size=n).astype(np.float64)
        got = md.cn_loss(x, y, np.ones(n)).value
        worst = max(worst, abs(got - _reference_bce(x, y)))
    _verdict(3, worst <= 1e-9,
             f"1000 cases with |logit| <= 30, max deviation {worst:.2e} <= 1e-9")


# ------------------------------------------------------------ 4: AP oracle


def _prefix_precision_ap(scores, labels, ids):
    """Quadratic-time AP: re-count positives in every prefix from scratch."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))
    precisions = []
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits = sum(labels[j] for j in order[:rank])
            precisions.append(hits / rank)
    return float(np.mean(np.asarray(precisions))) if precisions else None


def test_criterion_04_average_precision_equals_quadratic_oracle():
    hand = ev.average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    rng = np.random.default_rng(404)
    exact = 0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        scores = rng.integers(0, 6, size=n) / 5.0  # coarse grid -> heavy ties
        labels = rng.integers(0, 2, size=n)
        ids = [f"x{int(v):03d}" for v in rng.permutation(n)]
        got = ev.average_precision(scores, labels, ids)
        want = _prefix_precision_ap(list(scores), list(labels), ids)
        assert got == want  # exact, including None when no positives exist
        exact += 1
    ok = abs(hand - 5.0 / 6.0) < 1e-12 and exact == 1000
    _verdict(4, ok, f"hand case {hand:.12f} = 5/6, {exact} random instances exactly equal")


# -------------------------------------------------- 5: detection_map pools


THREE_CLASS_TAXONOMY = """\
[incidents]
fire
flood
crash

[places]
street
bridge
"""


def _example(eid, conf, targets, known, source="dataset"):
    return ev.ScoredExample(
        id=eid,
        confidences=np.asarray(conf, dtype=np.float64),
        targets=np.asarray(targets, dtype=np.float64),
        known=np.asarray(known, dtype=np.float64),
        source=source,
    )


def _enumerated_ap(pool):
    """AP of an explicit (score, label) pool, highest score first."""
    hits, precisions = 0, []
    for rank, (_, label) in enumerate(sorted(pool, key=lambda p: -p[0]), start=1):
        if label:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(np.asarray(precisions)))


def test_criterion_05_per_class_pools_match_explicit_enumeration():
    taxonomy = tx.parse_taxonomy(THREE_CLASS_TAXONOMY)
    examples = [
        _example("e1", (0.90, 0.20, 0.10), (1, 0, 0), (1, 1, 1)),
        _example("e2", (0.80, 0.70, 0.30), (0, 1, 0), (1, 1, 1)),
        _example("e3", (0.60, 0.40, 0.20), (0, 0, 0), (1, 0, 0)),
        _example("e4", (0.50, 0.60, 0.40), (0, 0, 0), (0, 1, 1)),
        _example("e5", (0.85, 0.40, 0.90), (0, 0, 0), (0, 0, 0), source="places_aug"),
        _example("e6", (0.20, 0.30, 0.80), (0, 0, 1), (1, 1, 1)),
        _example("e7", (0.70, 0.10, 0.60), (1, 0, 0), (1, 1, 1)),
        _example("e8", (0.10, 0.90, 0.50), (0, 0, 0), (0, 0, 1)),
    ]
    # every (class, example) membership written out by hand, as (score, label)
    pools_with_aug = {
        "fire": [(0.90, 1), (0.80, 0), (0.60, 0), (0.85, 0), (0.20, 0), (0.70, 1)],
        "flood": [(0.20, 0), (0.70, 1), (0.60, 0), (0.40, 0), (0.30, 0), (0.10, 0)],
        "crash": [(0.10, 0), (0.30, 0), (0.40, 0), (0.90, 0), (0.80, 1), (0.60, 0), (0.50, 0)],
    }
    pools_without_aug = {
        cls: [p for p in pool if p not in {
            "fire": [(0.85, 0)], "flood": [(0.40, 0)], "crash": [(0.90, 0)],
        }[cls]]
        for cls, pool in pools_with_aug.items()
    }
    checks = []
    for include_aug, pools in ((True, pools_with_aug), (False, pools_without_aug)):
        res = ev.detection_map(examples, "incident", taxonomy, include_places_aug=include_aug)
        for cls, pool in pools.items():
            checks.append(res.per_class_ap[cls] == _enumerated_ap(pool))
            checks.append(res.pool_positives[cls] == sum(l for _, l in pool))
            checks.append(res.pool_negatives[cls] == sum(1 - l for _, l in pool))
        want_mean = float(np.mean(np.asarray(
            [_enumerated_ap(pools[c]) for c in ("fire", "flood", "crash")]
        )))
        checks.append(res.mean_ap == want_mean)
    res = ev.detection_map(examples, "incident", taxonomy, include_places_aug=True)
    ok = all(checks)
    _verdict(5, ok, "8-example hand set: per-class APs "
                    f"{[res.per_class_ap[c] for c in ('fire', 'flood', 'crash')]} "
                    f"= enumeration, pools exact, mean {res.mean_ap}")


# ------------------------------------------- 6: hard-negative suppression


BENCHMARK_TRAIN = dict(lr=1e-2, batch_size=64, min_epochs=15, max_epochs=20, hidden=(32,))


def _hard_negative_accuracy(data, variant, class_negatives, seed):
    cfg = trainer.TrainConfig(
        loss_variant=variant, use_class_negatives=class_negatives,
        seed=seed, **BENCHMARK_TRAIN,
    )
    result = trainer.train(data.train_records, data.store, data.taxonomy, cfg)
    recs = [r for r in data.test_records if r.incident_pos is None and r.incident_neg]
    X = data.store.data[[r.embedding_index for r in recs]].astype(np.float64)
    inc_conf, _ = md.predict_confidences(result.params, X, variant)
    rows = ev.scored_examples(recs, inc_conf, "incident", data.taxonomy)
    probed = [data.taxonomy.incident_index(sorted(r.incident_neg)[0]) for r in recs]
    return ev.hard_negative_report(rows, probed, threshold=0.5).accuracy


def test_criterion_06_masked_loss_beats_softmax_on_hard_negatives():
    t0 = time.perf_counter()
    wins, gaps = 0, []
    for seed in range(10):
        data = generate(SynthSpec(seed=seed))
        cn_acc = _hard_negative_accuracy(data, "cn", True, seed)
        ce_acc = _hard_negative_accuracy(data, "ce", False, seed)
        wins += cn_acc > ce_acc
        gaps.append(cn_acc - ce_acc)  # accuracy gain == false-positive-rate drop
    elapsed = time.perf_counter() - t0
    mean_gap = float(np.mean(gaps))
    ok = wins >= 9 and mean_gap >= 0.10 and elapsed < 120.0
    _verdict(6, ok, f"{wins}/10 seeds won, mean false-positive rate lower by "
                    f"{mean_gap * 100:.1f}pp (need >= 10pp), {elapsed:.1f}s")


# ------------------------------------------------- 7: ablation machinery


def test_criterion_07_ablation_rows_run_and_scene_batches_skip_incident_head(tmp_path):
    # direct check: a scene-only batch backpropagates nothing into the
    # incident head while still training the place head
    taxonomy = tx.parse_taxonomy(THREE_CLASS_TAXONOMY)
    rng = np.random.default_rng(707)
    records = [
        ds.PartialLabelRecord(id=f"aug{i}", embedding_index=i,
                              source="places_aug", place_pos="street")
        for i in range(8)
    ]
    X = rng.normal(size=(8, 5))
    params = md.init_params(5, taxonomy.n_incidents, taxonomy.n_places, hidden=(6,))
    fwd = md.forward(params, X)
    inc_view = [ds.label_view(r, "incident", taxonomy) for r in records]
    pl_view = [ds.label_view(r, "place", taxonomy) for r in records]
    inc_loss = md.cn_loss(fwd.incident_logits,
                          np.stack([v.targets for v in inc_view]),
                          np.stack([v.weights for v in inc_view]))
    pl_loss = md.cn_loss(fwd.place_logits,
                         np.stack([v.targets for v in pl_view]),
                         np.stack([v.weights for v in pl_view]))
    grads = md.backward(params, fwd, inc_loss.grad_logits, pl_loss.grad_logits)
    inc_zero = all(np.all(g == 0.0) for g in grads.incident_head)
    place_live = any(np.any(g != 0.0) for g in grads.place_head)

    corpus = tmp_path / "corpus"
    assert cli.main(["synth", "--quiet", "--out", str(corpus)]) == 0
    files = json.load(open(corpus / "synth_report.json"))["files"]
    out = tmp_path / "ablation"
    rc = cli.main([
        "eval", "--quiet", "--table1", "--out", str(out),
        "--taxonomy", files["taxonomy"],
        "--train-manifest", files["train_manifest"],
        "--manifest", files["test_manifest"],
        "--embeddings", files["embeddings"],
        "--set", "train.min_epochs=2", "--set", "train.max_epochs=2",
        "--set", "train.hidden=8",
    ])
    report = json.load(open(out / "eval_report.json"))
    table_rows = [
        line for line in (out / "ablation.md").read_text().splitlines()
        if line.startswith("|") and "---" not in line
    ]
    ok = (inc_zero and place_live and rc == 0
          and len(report["rows"]) == 5 and len(table_rows) == 1 + 5)
    _verdict(7, ok, f"{len(report['rows'])}/5 rows trained and tabulated; "
                    "scene-only batch incident-head gradient exactly 0")


# -------------------------------------------------------- 8: dedup oracle


def _radius_graph_partition(pts, threshold):
    """Independent connected components: BFS over the <=threshold graph."""
    n = len(pts)
    unvisited = set(range(n))
    comps = []
    while unvisited:
        start = unvisited.pop()
        comp, frontier = {start}, [start]
        while frontier:
            i = frontier.pop()
            d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
            for j in [j for j in list(unvisited) if d[j] <= threshold]:
                unvisited.remove(j)
                comp.add(j)
                frontier.append(j)
        comps.append(frozenset(comp))
    return frozenset(comps)


def _as_id_partition(assignment):
    groups = {}
    for rid, cid in assignment.cluster_of.items():
        groups.setdefault(cid, set()).add(rid)
    return frozenset(frozenset(g) for g in groups.values())


def test_criterion_08_duplicate_partition_matches_graph_oracle():
    rng = np.random.default_rng(808)
    instances = 0
    for _ in range(200):
        n = int(rng.integers(2, 501))
        dim = int(rng.integers(1, 7))
        metric = "euclidean" if rng.random() < 0.75 else "cosine_distance"
        k = max(1, n // 50)
        centers = rng.normal(scale=3.0, size=(k, dim))
        pts = centers[rng.integers(0, k, size=n)] + rng.normal(scale=0.25, size=(n, dim))
        ids = [f"r{i:04d}" for i in range(n)]
        if metric == "euclidean":
            radius = float(rng.uniform(0.05, 0.5))
            oracle_pts, oracle_thresh = pts, radius
        else:
            radius = float(rng.uniform(0.005, 0.2))
            norms = np.linalg.norm(pts, axis=1, keepdims=True)
            oracle_pts = pts / norms
            # chord length equivalent to the cosine-distance radius
            oracle_thresh = math.sqrt(2.0 * radius)
        want = frozenset(
            frozenset(ids[i] for i in comp)
            for comp in _radius_graph_partition(oracle_pts, oracle_thresh)
        )
        store = ds.EmbeddingStore(pts.astype(np.float32).astype(np.float64))
        for strategy in ("brute_force", "grid"):
            got = _as_id_partition(
                dedup(store, ids, DedupConfig(radius=radius, metric=metric, strategy=strategy))
            )
            assert got == want, (n, dim, metric, strategy)
        instances += 1

    # relabeling the rows must not change the partition
    base_pts = np.concatenate([
        rng.normal(scale=0.1, size=(40, 3)) + c
        for c in rng.normal(scale=2.0, size=(5, 3))[:, None, :]
    ])
    base_ids = [f"p{i:03d}" for i in range(len(base_pts))]
    cfg = DedupConfig(radius=0.35, metric="euclidean", strategy="brute_force")
    reference = _as_id_partition(dedup(ds.EmbeddingStore(base_pts), base_ids, cfg))
    stable = 0
    for _ in range(20):
        perm = rng.permutation(len(base_pts))
        shuffled = dedup(
            ds.EmbeddingStore(np.ascontiguousarray(base_pts[perm])),
            [base_ids[i] for i in perm], cfg,
        )
        stable += _as_id_partition(shuffled) == reference
    ok = instances == 200 and stable == 20
    _verdict(8, ok, f"{instances} instances: brute == grid == graph oracle; "
                    f"{stable}/20 shuffles left the partition unchanged")


# ------------------------------------------------------------ 9: geo eval


def test_criterion_09_great_circle_anchors_and_filtered_curve_dominance(synth_data):
    zero = an.haversine_km((37.42, -122.08), (37.42, -122.08))
    quarter = an.haversine_km((0.0, 0.0), (0.0, 90.0))
    pole = an.haversine_km((0.0, 0.0), (90.0, 0.0))
    half = an.haversine_km((0.0, 0.0), (0.0, 180.0))
    quarter_true = math.pi * 6371.0 / 2.0  # 10007.5434 km at 4 decimals
    half_true = math.pi * 6371.0  # 20015.0868 km at 4 decimals
    anchors = (
        zero == 0.0
        and abs(quarter - quarter_true) < 1e-6
        and abs(pole - quarter_true) < 1e-6
        and abs(half - half_true) < 1e-6
    )

    rng = np.random.default_rng(909)
    monotone = True
    for _ in range(30):
        dets = [
            an.Detection(id=f"d{i}", category="c", confidence=0.9,
                         lat=float(rng.uniform(-90, 90)),
                         lon=float(rng.uniform(-180, 180)))
            for i in range(int(rng.integers(1, 40)))
        ]
        events = [
            an.GeoEvent(name=f"e{i}", timestamp=date(2020, 1, 1), category="c",
                        lat=float(rng.uniform(-90, 90)),
                        lon=float(rng.uniform(-180, 180)))
            for i in range(int(rng.integers(1, 5)))
        ]
        xs = sorted(float(x) for x in rng.uniform(1.0, 21000.0, size=6))
        curve = an.accuracy_at_km(dets, events, xs)
        vals = [curve[x] for x in xs]
        monotone = monotone and all(a <= b for a, b in zip(vals, vals[1:]))

    xs = list(GeoConfig().x_values)
    unfilt = an.accuracy_at_km(synth_data.detections, synth_data.events, xs)
    filt = an.accuracy_at_km(
        an.filter_by_confidence(synth_data.detections, None, 0.5),
        synth_data.events, xs,
    )
    dominates = all(filt[x] >= unfilt[x] for x in xs)
    improves = any(filt[x] > unfilt[x] for x in xs)
    ok = anchors and monotone and dominates and improves
    _verdict(9, ok, f"quarter arc {quarter:.4f} km, half arc {half:.4f} km "
                    "(closed form, 1e-6); curve monotone in radius; "
                    "filtered curve dominates at all 8 radii")


# ------------------------------------------------------- 10: burst metrics


def test_criterion_10_burst_ratios_and_onset_recovery(synth_data):
    start = date(2020, 1, 1)
    flat = an.DailySeries(start=start, counts=np.full(40, 5, dtype=np.int64))
    flat_ok = all(
        an.rti(flat, start + timedelta(days=d), 7) == 1.0 for d in range(7, 33)
    )

    step = an.DailySeries(start=start, counts=np.array([1] * 8 + [2] * 8))
    step_ok = an.rti(step, start + timedelta(days=7), 7) == 1.875

    series, events = synth_data.series, synth_data.events
    counts = [int(c) for c in series.counts]
    result = an.mrti(series, events, 7)
    by_name = {e.name: series.index_of(e.timestamp) for e in events}
    expected = {}
    for name, e in by_name.items():
        expected[name] = sum(counts[e : e + 8]) / sum(counts[e - 7 : e + 1])
    per_event_ok = all(result.per_event[n] == expected[n] for n in result.per_event)
    mean_ok = result.mean == float(np.mean(np.asarray(
        [expected[n] for n in result.per_event]
    )))

    a = an.DailySeries(start=start, counts=np.array([1, 1, 0]))
    b = an.DailySeries(start=start, counts=np.array([1, 0, 1]))
    iou_ok = abs(an.histogram_iou(a, b, smooth_window=1) - 1.0 / 3.0) < 1e-12

    recovered = 0
    for seed in range(1000, 1050):
        scenario_series, onsets = temporal_scenario(SynthSpec(seed=seed))
        flagged = an.flag_peaks(scenario_series, 7, 2.0)
        recovered += flagged == sorted(onsets)
    ok = flat_ok and step_ok and per_event_ok and mean_ok and iou_ok and recovered == 50
    _verdict(10, ok, "flat ratio exactly 1.0, step exactly 1.875, "
                     "per-event means exact, histogram overlap 1/3, "
                     f"onsets recovered exactly in {recovered}/50 scenarios")


# ------------------------------------------------------- 11: determinism


def test_criterion_11_identical_seed_reproduces_training_bit_for_bit(tmp_path):
    corpus = tmp_path / "data"
    assert cli.main(["synth", "--quiet", "--out", str(corpus)]) == 0
    files = json.load(open(corpus / "synth_report.json"))["files"]
    argv = [
        "train", "--quiet",
        "--taxonomy", files["taxonomy"],
        "--manifest", files["train_manifest"],
        "--embeddings", files["embeddings"],
        "--set", "train.min_epochs=4", "--set", "train.max_epochs=4",
        "--set", "train.hidden=16",
    ]
    for sub in ("a", "b"):
        assert cli.main(argv + ["--out", str(tmp_path / sub)]) == 0
    same_ckpt = filecmp.cmp(
        tmp_path / "a" / "checkpoint.bin", tmp_path / "b" / "checkpoint.bin",
        shallow=False,
    )
    same_log = filecmp.cmp(
        tmp_path / "a" / "train_log.jsonl", tmp_path / "b" / "train_log.jsonl",
        shallow=False,
    )
    _verdict(11, same_ckpt and same_log,
             "two identical-config runs: checkpoint bytes equal, epoch logs equal")


# ---------------------------------------------------------- 12: taxonomy


def test_criterion_12_bundled_taxonomy_counts_and_annotation_gate(default_tax):
    pairs = tx.generate_query_pairs(default_tax)
    truth = [True] * 15
    thirteen = tx.qc_accept_batch([True] * 13 + [False] * 2, truth)
    twelve = tx.qc_accept_batch([True] * 12 + [False] * 3, truth)
    ok = (
        default_tax.n_incidents == 43
        and default_tax.n_places == 49
        and len(pairs) == 2107
        and thirteen.accepted
        and not twelve.accepted
    )
    _verdict(12, ok, f"{default_tax.n_incidents} incidents x {default_tax.n_places} "
                     f"places -> {len(pairs)} query pairs; 13/15 accepted "
                     f"({thirteen.accuracy:.3f}), 12/15 rejected ({twelve.accuracy:.2f})")
