"""Acceptance gate: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -v -s``. The real-dataset
checks (criterion 10) need ``--with-real-data`` plus the dataset
directories in VEHIDS_CAR_HACKING_DIR / VEHIDS_CICIDS2017_DIR; they are
skipped otherwise.
"""

import math
import os
import time
from pathlib import Path
from statistics import NormalDist

import numpy as np
import pytest

from vehids import pso
from vehids.cnn import (
    CnnConfig,
    build_cnn,
    fine_tune,
    gradient_check,
    softmax,
    train,
)
from vehids.ensemble import (
    build_averaging,
    build_concatenated,
    confidence_average,
)
from vehids.evaluation import confusion, kfold_split, metrics, time_inference
from vehids.ingest import SynthConfig, TrafficRecord, generate_synthetic_can
from vehids.pipeline import (
    build_image_set,
    derive_seed,
    image_set_hash,
    images_to_arrays,
    model_weights_hash,
    run_cv,
    variant_config,
)
from vehids.transform import (
    CAN_CHUNK,
    FLOW_CHUNK,
    apply_quantile_map,
    apply_quantile_map_matrix,
    chunk_records,
    export_images,
    fit_quantile_map,
)

MIX = {"Normal": 0.5, "DoS": 0.125, "Fuzzy": 0.125, "Gear": 0.125, "RPM": 0.125}


def ok(n: int, text: str) -> None:
    print(f"[PASS] criterion {n}: {text}")


def records_from_matrix(values: np.ndarray) -> list[TrafficRecord]:
    return [
        TrafficRecord(float(i), tuple(row), 0) for i, row in enumerate(values)
    ]


class TestCriterion1TransformGeometry:
    def test_chunk_counts_exact_and_fast(self):
        rng = np.random.default_rng(1001)
        n = 100_000
        can_records = records_from_matrix(rng.normal(size=(n, 9)))

        started = time.perf_counter()
        qmap = fit_quantile_map(can_records, n_quantiles=1000, fit_source="c1")
        chunks = chunk_records(can_records, CAN_CHUNK, qmap)
        elapsed = time.perf_counter() - started

        assert len(chunks) == n // 27 == 3703
        assert all(c.pixels.shape == (9, 9, 3) for c in chunks)
        assert elapsed < 1.0, f"transform took {elapsed:.2f}s for N=1e5"

        flow_records = records_from_matrix(rng.normal(size=(6000, 20)))
        qmap_f = fit_quantile_map(flow_records, n_quantiles=1000, fit_source="c1f")
        flow_chunks = chunk_records(flow_records, FLOW_CHUNK, qmap_f)
        assert len(flow_chunks) == 6000 // 60 == 100
        assert all(c.pixels.shape == (20, 20, 3) for c in flow_chunks)
        ok(1, f"floor(1e5/27)={len(chunks)} 9x9x3 images in {elapsed*1000:.0f} ms; "
              f"floor(6000/60)={len(flow_chunks)} 20x20x3 images")


def oracle_pixels(sample: np.ndarray, probes: np.ndarray, clip: float = 5.0) -> np.ndarray:
    """Independent oracle: exact sort, midpoint ranks, stdlib inverse CDF."""
    srt = np.sort(sample)
    n = len(srt)
    lo = np.searchsorted(srt, probes, side="left")
    hi = np.searchsorted(srt, probes, side="right")
    p = np.empty(len(probes))
    tied = hi > lo
    p[tied] = (lo[tied] + 0.5 * (hi[tied] - lo[tied])) / n
    inner = ~tied & (lo > 0) & (lo < n)
    li = lo[inner]
    xl, xr = srt[li - 1], srt[li]
    pl, pr = (li - 0.5) / n, (li + 0.5) / n
    p[inner] = pl + (probes[inner] - xl) / (xr - xl) * (pr - pl)
    inv = NormalDist().inv_cdf
    z = np.array([inv(v) if 0 < v < 1 else 0.0 for v in p])
    z = np.clip(z, -clip, clip)
    out = np.floor((z + clip) / (2 * clip) * 255 + 0.5).astype(np.int64)
    out[probes < srt[0]] = 0
    out[probes > srt[-1]] = 255
    return out


class TestCriterion2QuantileTransform:
    def test_monotone_bounded_median_and_oracle(self):
        rng = np.random.default_rng(1002)
        data = rng.normal(size=100_000)
        recs = records_from_matrix(data.reshape(-1, 1))

        # monotonicity over 1e4 random pairs, pixels bounded
        qm = fit_quantile_map(recs, n_quantiles=1000, fit_source="c2")
        pairs = np.sort(rng.normal(size=(10_000, 2)) * 2, axis=1)
        p_lo = apply_quantile_map_matrix(qm, pairs[:, :1])[:, 0]
        p_hi = apply_quantile_map_matrix(qm, pairs[:, 1:])[:, 0]
        assert np.all(p_lo <= p_hi)
        assert p_lo.min() >= 0 and p_hi.max() <= 255

        # empirical median -> 128 exactly (median is a grid node when the
        # quantile count is odd)
        qm_odd = fit_quantile_map(recs, n_quantiles=1001, fit_source="c2")
        med = float(np.median(data))
        assert apply_quantile_map(qm_odd, [med])[0] == 128

        # agreement with the exact-sort oracle on all 1e5 samples
        qm_full = fit_quantile_map(recs, n_quantiles=len(data), fit_source="c2")
        got = apply_quantile_map_matrix(qm_full, data.reshape(-1, 1))[:, 0].astype(np.int64)
        want = oracle_pixels(data, data)
        max_diff = int(np.abs(got - want).max())
        assert max_diff <= 2

        # spot value: 97.7th percentile lands near (2+5)/10*255
        x977 = float(np.quantile(data, 0.977))
        pix = int(apply_quantile_map(qm, [x977])[0])
        assert abs(pix - 178.5) <= 2
        ok(2, f"monotone, bounded, median->128, oracle max diff {max_diff}, "
              f"97.7th pct -> {pix}")


class TestCriterion3Softmax:
    def test_sum_shift_and_example(self):
        rng = np.random.default_rng(1003)
        for _ in range(500):
            z = rng.normal(scale=20, size=rng.integers(1, 10))
            s = softmax(z)
            assert abs(s.sum() - 1.0) <= 1e-9
            c = rng.normal(scale=100)
            assert np.abs(softmax(z + c) - s).max() <= 1e-9
        got = softmax(np.array([1.0, 2.0, 3.0]))
        want = np.array([0.09003, 0.24473, 0.66524])
        assert np.abs(got - want).max() <= 1e-5
        ok(3, f"sum/shift within 1e-9; [1,2,3] -> {np.round(got, 5).tolist()}")


class TestCriterion4GradientCorrectness:
    def test_tiny_cnn_against_finite_differences(self):
        model = build_cnn(
            CnnConfig(conv_blocks=(4,), dense_width=8, dropout_rate=0.0, rng_seed=3),
            (9, 9, 3), 3,
        )
        assert model.n_parameters <= 10_000
        rng = np.random.default_rng(1004)
        x = rng.random((4, 9, 9, 3)).astype(np.float32)
        y = np.array([0, 1, 2, 0])
        started = time.perf_counter()
        err = gradient_check(model, (x, y), n_samples=250)
        elapsed = time.perf_counter() - started
        assert err < 1e-4
        assert elapsed < 30.0
        ok(4, f"max relative error {err:.2e} over 250 coords in {elapsed:.1f}s "
              f"({model.n_parameters} params)")


class TestCriterion5FreezeContract:
    def test_frozen_layers_bit_identical_for_0_1_all(self):
        rng = np.random.default_rng(1005)
        x = rng.integers(0, 256, size=(120, 9, 9, 3)).astype(np.uint8)
        y = rng.integers(0, 3, size=120)
        cfg = CnnConfig(conv_blocks=(6,), dense_width=16, dropout_rate=0.2,
                        batch_size=32, max_epochs=3, early_stop_patience=3,
                        rng_seed=50)
        pretrained = build_cnn(cfg, (9, 9, 3), 3)
        pretrained, _ = train(pretrained, (x, y), (x[:30], y[:30]), cfg)
        before = [
            {k: v.copy() for k, v in layer.params.items()}
            for layer in pretrained.weighted_layers
        ]
        total = len(pretrained.weighted_layers)
        for frozen in (0, 1, total):
            tuned, _ = fine_tune(pretrained, (x, y), (x[:30], y[:30]), frozen,
                                 CnnConfig(conv_blocks=(6,), dense_width=16,
                                           dropout_rate=0.2, batch_size=32,
                                           max_epochs=2, early_stop_patience=2,
                                           rng_seed=51))
            for i in range(frozen):
                for key, val in before[i].items():
                    got = tuned.weighted_layers[i].params[key]
                    assert got.tobytes() == val.tobytes(), (
                        f"frozen layer {i} ({key}) changed with frozen={frozen}"
                    )
        ok(5, f"frozen weights byte-identical for frozen_layers in "
              f"{{0, 1, {total}}}")


class TestCriterion6Pso:
    def test_hand_step_sphere_trace_and_bounds(self):
        # exact single-step reproduction
        space1 = pso.SearchSpace((pso.Dim("x", pso.CONTINUOUS, 0, 10),))
        swarm = pso.init_swarm(space1, 2, seed=0)
        swarm.positions[0] = 1.0
        swarm.velocities[0] = 0.5
        swarm.pbest_positions[0] = 2.0
        swarm.pbest_scores[0] = 0.5
        swarm.positions[1] = 3.0
        swarm.velocities[1] = 0.0
        swarm.pbest_positions[1] = 3.0
        swarm.pbest_scores[1] = 0.9
        swarm.gbest_position[:] = 3.0
        swarm.gbest_score = 0.9

        class Queued:
            def __init__(self):
                self.draws = [0.5, 0.25]

            def uniform(self, low, high, size):
                return np.full(size, self.draws.pop(0))

        swarm.rng = Queued()
        pso.step(swarm, [0.1, 0.1])
        assert swarm.velocities[0, 0] == 1.5
        assert swarm.positions[0, 0] == 2.5

        # negative sphere over [-5, 5]^2: 20 particles, 50 iterations
        space = pso.SearchSpace((
            pso.Dim("x", pso.CONTINUOUS, -5, 5),
            pso.Dim("y", pso.CONTINUOUS, -5, 5),
        ))
        started = time.perf_counter()
        hits = 0
        for seed in range(20):
            seen = []

            def objective(pos):
                seen.append(pos.copy())
                return -float(np.sum(pos ** 2))

            _, score, trace = pso.optimize(space, objective, 20, 50, seed=seed)
            if -score < 1e-2:
                hits += 1
            assert all(b >= a for a, b in zip(trace.best_scores, trace.best_scores[1:]))
            stacked = np.stack(seen)
            assert stacked.min() >= -5.0 and stacked.max() <= 5.0
        elapsed = time.perf_counter() - started
        assert hits >= 18, f"only {hits}/20 seeds reached |f| < 1e-2"
        assert elapsed < 10.0
        ok(6, f"hand step x'=2.5 exact; sphere {hits}/20 seeds < 1e-2 in "
              f"{elapsed:.1f}s; traces monotone; positions in bounds")


class TestCriterion7Ensemble:
    def test_averaging_oracle_permutations_and_feature_length(self):
        rng = np.random.default_rng(1007)
        for _ in range(10_000):
            c = int(rng.integers(2, 7))
            triple = rng.dirichlet(np.ones(c), size=3)
            decision = confidence_average(triple)
            mean = [math.fsum(v[i] for v in triple) / 3 for i in range(c)]
            best = max(range(c), key=lambda i: (mean[i], -i))
            assert decision.label == best
            assert decision.confidence == mean[best]

        for _ in range(500):
            triple = rng.dirichlet(np.ones(4), size=3)
            base = confidence_average(triple)
            for perm in ([1, 0, 2], [2, 1, 0], [0, 2, 1], [1, 2, 0], [2, 0, 1]):
                assert confidence_average(triple[perm]).combined == base.combined

        widths = (48, 64, 96)
        models = [
            build_cnn(CnnConfig(conv_blocks=(4,), dense_width=w, rng_seed=w),
                      (9, 9, 3), 4)
            for w in widths
        ]
        assert build_averaging(models).feature_length == sum(widths) == 208
        ok(7, "averaging == fsum oracle on 1e4 triples; permutation-invariant; "
              f"F = {sum(widths)} = sum of dense widths")


class TestCriterion8Evaluation:
    def test_metrics_oracle_and_fold_invariants(self):
        rng = np.random.default_rng(1008)
        for _ in range(1000):
            c = int(rng.integers(2, 7))
            n = int(rng.integers(5, 120))
            t = rng.integers(0, c, size=n)
            p = rng.integers(0, c, size=n)
            rep = metrics(confusion(t, p, c))
            # brute-force per-class counters
            diag = [int(((t == i) & (p == i)).sum()) for i in range(c)]
            col = [int((p == i).sum()) for i in range(c)]
            row = [int((t == i).sum()) for i in range(c)]
            prec = [d / cj if cj else 0.0 for d, cj in zip(diag, col)]
            rec = [d / rj if rj else 0.0 for d, rj in zip(diag, row)]
            f1 = [2 * a * b / (a + b) if a + b else 0.0 for a, b in zip(prec, rec)]
            assert rep.accuracy == pytest.approx(sum(diag) / n)
            assert rep.precision == pytest.approx(tuple(prec))
            assert rep.recall == pytest.approx(tuple(rec))
            assert rep.f1 == pytest.approx(tuple(f1))
            assert rep.macro_f1 == pytest.approx(sum(f1) / c)

        for trial in range(200):
            k = int(rng.integers(2, 8))
            c = int(rng.integers(2, 6))
            n = int(rng.integers(max(k, c * k), 300))
            labels = rng.integers(0, c, size=n)
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                plan = kfold_split(n, k, labels, seed=trial)
            flat = sorted(i for f in plan.folds for i in f)
            assert flat == list(range(n))
            sizes = [len(f) for f in plan.folds]
            assert max(sizes) - min(sizes) <= 1
            for cls in range(c):
                per = [sum(1 for i in f if labels[i] == cls) for f in plan.folds]
                assert max(per) - min(per) <= 1
        ok(8, "metrics == brute-force on 1000 label sets; fold plans disjoint, "
              "covering, within-1 balanced on 200 random instances")


class TestCriterion9EndToEndSynthetic:
    def test_full_synthetic_pipeline_reaches_target_f1(self):
        started = time.perf_counter()
        config = SynthConfig(n_records=50_000, attack_mix=MIX, rng_seed=20260810)
        records = generate_synthetic_can(config)
        qmap, images = build_image_set([records], CAN_CHUNK, fit_source="c9")
        x, y = images_to_arrays(images)
        assert len(x) == 50_000 // 27

        hyper = dict(pso.OPTIMAL_HYPERPARAMS)  # epochs 20, batch 128, lr 0.003,
        assert hyper == {"max_epochs": 20, "batch_size": 128,  # dropout 0.5,
                         "early_stop_patience": 3,             # patience 3
                         "learning_rate": 0.003, "dropout_rate": 0.5}
        result = run_cv(x, y, hyper, n_variants=5, k=3, seed=0, folds=5)
        elapsed = time.perf_counter() - started

        f1_avg = result.macro_f1("confidence_averaging")
        f1_cat = result.macro_f1("concatenation")
        assert f1_avg >= 0.99, f"confidence averaging macro-F1 {f1_avg:.5f} < 0.99"
        assert f1_cat >= 0.99, f"concatenation macro-F1 {f1_cat:.5f} < 0.99"
        assert elapsed < 900.0, f"pipeline took {elapsed:.0f}s (> 15 min)"
        ok(9, f"50k records -> {len(x)} images; macro-F1 averaging "
              f"{f1_avg:.5f}, concatenation {f1_cat:.5f} in {elapsed:.0f}s")


@pytest.fixture()
def real_data_flag(request):
    return request.config.getoption("--with-real-data")


class TestCriterion10RealData:
    def test_car_hacking(self, real_data_flag):
        data_dir = os.environ.get("VEHIDS_CAR_HACKING_DIR")
        if not real_data_flag or not data_dir:
            pytest.skip("run with --with-real-data and VEHIDS_CAR_HACKING_DIR")
        from vehids.ingest import CAN_SCHEMA, parse_can_log

        files = {"DoS": "DoS_dataset.csv", "Fuzzy": "Fuzzy_dataset.csv",
                 "Gear": "gear_dataset.csv", "RPM": "RPM_dataset.csv"}
        per_file = 500_000 // len(files)
        sources = []
        for cls, name in files.items():
            path = Path(data_dir) / name
            records = parse_can_log(path, CAN_SCHEMA, attack_class=cls)
            sources.append(records[:per_file])
        _, images = build_image_set(sources, CAN_CHUNK, fit_source="car-hacking")
        x, y = images_to_arrays(images)
        result = run_cv(x, y, dict(pso.OPTIMAL_HYPERPARAMS),
                        n_variants=5, k=3, seed=0, folds=5)
        f1_avg = result.macro_f1("confidence_averaging")
        f1_cat = result.macro_f1("concatenation")
        assert min(f1_avg, f1_cat) >= 0.995
        ok(10, f"Car-Hacking 500k subset macro-F1 avg {f1_avg:.5f} / "
               f"cat {f1_cat:.5f}")

    def test_cicids2017(self, real_data_flag):
        data_dir = os.environ.get("VEHIDS_CICIDS2017_DIR")
        if not real_data_flag or not data_dir:
            pytest.skip("run with --with-real-data and VEHIDS_CICIDS2017_DIR")
        from vehids.ingest import FLOW_SCHEMA, parse_flow_csv

        sources = []
        for path in sorted(Path(data_dir).glob("*.csv")):
            sources.append(parse_flow_csv(path, FLOW_SCHEMA))
        _, images = build_image_set(sources, FLOW_CHUNK, fit_source="cicids2017")
        x, y = images_to_arrays(images)
        result = run_cv(x, y, dict(pso.OPTIMAL_HYPERPARAMS),
                        n_variants=5, k=3, seed=0, folds=5)
        f1 = max(result.macro_f1("confidence_averaging"),
                 result.macro_f1("concatenation"))
        assert f1 >= 0.95
        ok(10, f"CICIDS2017 6-class macro-F1 {f1:.5f}")


class TestCriterion11Latency:
    def test_mean_ensemble_inference_under_budget(self):
        rng = np.random.default_rng(1011)
        x = rng.integers(0, 256, size=(1200, 9, 9, 3)).astype(np.uint8)
        y = rng.integers(0, 5, size=1200)
        hyper = {"max_epochs": 1, "batch_size": 128, "early_stop_patience": 1,
                 "learning_rate": 0.003, "dropout_rate": 0.5}
        models = []
        for v in range(3):
            cfg = variant_config(hyper, v, derive_seed(77, v))
            m = build_cnn(cfg, (9, 9, 3), 5)
            m, _ = train(m, (x[:200], y[:200]), (x[200:260], y[200:260]), cfg)
            models.append(m)

        avg = build_averaging(models)
        report_avg = time_inference(avg, x[:1000], repetitions=1)
        cat = build_concatenated(models, (x[:200], y[:200]),
                                 (x[200:260], y[200:260]),
                                 variant_config(hyper, 0, 88))
        report_cat = time_inference(cat, x[:1000], repetitions=1)

        assert report_avg.mean_ms < 10.0, f"averaging mean {report_avg.mean_ms:.2f} ms"
        assert report_cat.mean_ms < 10.0, f"concatenation mean {report_cat.mean_ms:.2f} ms"
        assert not report_avg.over_budget and not report_cat.over_budget
        ok(11, f"mean per-image inference: averaging {report_avg.mean_ms:.2f} ms, "
               f"concatenation {report_cat.mean_ms:.2f} ms (budget 10 ms)")


class TestCriterion12Reproducibility:
    def test_identical_manifests_reproduce_everything(self, tmp_path):
        def full_run(out_dir: Path):
            config = SynthConfig(n_records=6_000, attack_mix=MIX, rng_seed=77)
            records = generate_synthetic_can(config)
            qmap, images = build_image_set([records], CAN_CHUNK, fit_source="c12")
            export_images(images, out_dir, ("Normal", "DoS", "Fuzzy", "Gear", "RPM"))
            png_bytes = b"".join(
                p.read_bytes() for p in sorted(out_dir.glob("chunk_*.png"))
            )
            x, y = images_to_arrays(images)
            hyper = {"max_epochs": 4, "batch_size": 64, "early_stop_patience": 4,
                     "learning_rate": 0.003, "dropout_rate": 0.3}
            init_hashes = [
                model_weights_hash(build_cnn(variant_config(hyper, v, derive_seed(9, v)),
                                             (9, 9, 3), 5))
                for v in range(2)
            ]
            result = run_cv(x, y, hyper, n_variants=2, k=2, seed=9, folds=2)
            report_text = "\n".join(
                f"{s}\t{r.report.accuracy:.6f}\t{r.report.macro_f1:.6f}"
                for s, r in sorted(result.strategies.items())
            )
            return {
                "image_hash": image_set_hash(images),
                "png_bytes": png_bytes,
                "index": (out_dir / "index.csv").read_bytes(),
                "init_hashes": init_hashes,
                "report": report_text,
            }

        a = full_run(tmp_path / "run1")
        b = full_run(tmp_path / "run2")
        assert a["image_hash"] == b["image_hash"]
        assert a["png_bytes"] == b["png_bytes"]
        assert a["index"] == b["index"]
        assert a["init_hashes"] == b["init_hashes"]
        assert a["report"] == b["report"]
        ok(12, "two identical-manifest runs: byte-identical image set and PNGs, "
               "bit-identical initial weights, identical metrics reports")
