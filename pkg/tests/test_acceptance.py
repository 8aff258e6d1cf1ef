"""Acceptance suite: one test per exit criterion, each printing a PASS/FAIL
line. Run with ``pytest tests/test_acceptance.py -s`` to see the lines live.

Criteria (tolerances pinned here, nothing deferred):
  1. reverse-mode gradients match central differences (h=1e-5, rel <= 1e-4, <10 s)
  2. adaptive mixer weights are a convex combination (1e-12) over 1000 fuzz cases
  3. stacked receptive field for spans [2,4,8] is exactly 13 positions back
  4. AP/AUC match exhaustive brute-force enumeration (10,000 draws, 1e-12)
  5. learnable periodic stream: test AP and AUC >= 0.85 in <= 30 epochs, < 5 min
  6. op-count scaling slopes: adaptive <= 1.05, attention >= 1.95
  7. invariances: time shift (bit-exact), monotone AUC, byte-identical reruns
  8. the six-variant ablation sweep completes and pins the fusion coefficient
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from tempomix import mixers as mx
from tempomix import model as md
from tempomix import numcore as nc
from tempomix import tgraph as tg
from tempomix import traineval as te
from tempomix.cli import main, run_bench


@contextmanager
def criterion(number, description):
    try:
        yield
        print(f"\n[criterion {number}] PASS  {description}")
    except BaseException:
        print(f"\n[criterion {number}] FAIL  {description}")
        raise


def test_c1_gradient_fidelity():
    with criterion(1, "full-model gradients vs central finite differences"):
        start = time.perf_counter()
        rng = np.random.default_rng(0)
        n_nodes, n_events = 5, 6
        src = rng.integers(n_nodes, size=n_events)
        dst = (src + 1 + rng.integers(n_nodes - 1, size=n_events)) % n_nodes
        stream = tg.EventStream(src, dst, np.arange(1.0, n_events + 1),
                                rng.normal(size=(n_events, 3)), node_count=n_nodes,
                                node_feats=rng.normal(size=(n_nodes, 2)))
        store = tg.TemporalStore(stream)
        cfg = md.ModelConfig(dim=4, time_dim=6, spans=(2, 4), mixer="adaptive", n_max=4)
        params = md.init_params(cfg, stream.node_dim, stream.edge_dim, seed=1)
        queries = [(int(stream.src[i]), int(stream.dst[i]),
                    int((stream.dst[i] + 1) % n_nodes), float(stream.t[i]))
                   for i in range(2, n_events)]

        def f(bound_values):
            return md.batch_loss(md.BoundModel(cfg, bound_values), store, queries)

        report = nc.grad_check(f, params.tensors, h=1e-5, tol=1e-4)
        elapsed = time.perf_counter() - start
        assert report.max_rel_error <= 1e-4, report.max_rel_error
        assert elapsed < 10.0, f"gradient check took {elapsed:.1f}s"


def test_c2_mixer_weight_normalization_fuzz():
    with criterion(2, "adaptive weights sum to 1 and outputs stay in window bounds"):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 16))
            k = int(rng.integers(1, 6))
            start = int(rng.integers(0, 5))
            offsets = np.arange(start, start + k)
            times = np.sort(rng.uniform(0, 20, size=n))
            logits = rng.normal(scale=2.0, size=(1, k))
            fusion = float(rng.uniform(0, 1))

            tape = nc.Tape()
            ones_out = mx.adaptive_mix(tape.constant(np.ones((n, 2))), times, offsets,
                                       tape.constant(logits), fusion)
            covered = np.array([any(i - p >= 0 for p in offsets) for i in range(n)])
            np.testing.assert_allclose(ones_out.data[covered], 1.0, atol=1e-12)
            np.testing.assert_allclose(ones_out.data[~covered], 1.0, atol=0)

            h = rng.normal(size=(n, 3))
            out = mx.adaptive_mix(tape.constant(h), times, offsets,
                                  tape.constant(logits), fusion)
            for i in range(n):
                window = [i - p for p in offsets if i - p >= 0] or [i]
                rows = h[window]
                assert np.all(out.data[i] >= rows.min(axis=0) - 1e-12)
                assert np.all(out.data[i] <= rows.max(axis=0) + 1e-12)


def test_c3_receptive_field_exact():
    with criterion(3, "stacked receptive field for spans [2,4,8] reaches back 13"):
        rng = np.random.default_rng(2)
        schedule = mx.OffsetSchedule([2, 4, 8])
        assert schedule.max_lookback() == 13
        n, d = 32, 3
        times = np.sort(rng.uniform(0, 40, size=n))
        logits = [rng.normal(size=(1, schedule.kernel_size(layer)))
                  for layer in range(1, 4)]
        gains = [rng.uniform(0.5, 1.5, size=(1, d)) for _ in range(3)]
        ffs = [(rng.normal(size=(d, 4 * d)) * 0.3, rng.normal(size=(4 * d, d)) * 0.3)
               for _ in range(3)]

        def forward(h):
            tape = nc.Tape()
            tokens = tape.constant(h)
            for layer in range(1, 4):
                mixer = mx.AdaptiveLayer(schedule.offsets(layer),
                                         tape.constant(logits[layer - 1]), 0.5)
                channel = mx.ChannelParams(
                    tape.constant(gains[layer - 1]), tape.constant(np.zeros((1, d))),
                    tape.constant(ffs[layer - 1][0]), tape.constant(np.zeros((1, 4 * d))),
                    tape.constant(ffs[layer - 1][1]), tape.constant(np.zeros((1, d))))
                tokens = mx.token_block(tokens, times, mixer, channel)
            return tokens.data

        h0 = rng.normal(size=(n, d))
        base = forward(h0)
        for j in range(n):
            bumped = h0.copy()
            bumped[j] += 0.41
            changed = set(np.nonzero(np.abs(forward(bumped) - base).max(axis=1) > 1e-12)[0])
            assert changed == set(range(j, min(n, j + 14))), f"row {j}: {sorted(changed)}"


def ap_oracle(scores, labels):
    thresholds = sorted(set(scores), reverse=True)
    total_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for th in thresholds:
        tp = sum(1 for s, y in zip(scores, labels) if s >= th and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= th and y == 0)
        ap += (tp / total_pos - prev_recall) * (tp / (tp + fp))
        prev_recall = tp / total_pos
    return ap


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_c4_metric_oracles():
    with criterion(4, "AP/AUC equal brute-force enumeration on 10,000 small cases"):
        assert te.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == \
            pytest.approx(0.833333, abs=1e-6)
        assert te.auc_roc([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == 0.75

        rng = np.random.default_rng(3)
        grid = np.linspace(0, 1, 5)
        checked_ap = checked_auc = 0
        for _ in range(10_000):
            n = int(rng.integers(2, 9))
            scores = rng.choice(grid, size=n)
            labels = rng.integers(0, 2, size=n).astype(float)
            if labels.sum() >= 1:
                assert abs(te.average_precision(scores, labels)
                           - ap_oracle(list(scores), list(labels))) <= 1e-12
                checked_ap += 1
            if 0 < labels.sum() < n:
                assert abs(te.auc_roc(scores, labels)
                           - auc_oracle(list(scores), list(labels))) <= 1e-12
                checked_auc += 1
        assert checked_ap > 8000 and checked_auc > 6000


def test_c5_learning_signal():
    with criterion(5, "periodic stream learned to AP/AUC >= 0.85 within 30 epochs"):
        start = time.perf_counter()
        spec = tg.SyntheticSpec(n_src=10, n_dst=10, n_events=10_000,
                                pattern="periodic", p_repeat=0.9)
        stream = tg.generate_synthetic(spec, seed=42)
        cfg = md.ModelConfig(dim=32, time_dim=100, spans=(2, 4),
                             mixer="adaptive", n_max=8)

        untrained = md.init_params(cfg, stream.node_dim, stream.edge_dim, seed=0)
        _, _, test_split = tg.chronological_split(stream, te.TRAIN_RATIO, te.VAL_RATIO)
        store = tg.TemporalStore(stream)
        ap0, auc0 = te.evaluate(untrained, test_split, store, stream.destinations(),
                                seed=[0, te.TEST_SEED_TAG])
        assert ap0 == pytest.approx(0.5, abs=0.05)
        assert auc0 == pytest.approx(0.5, abs=0.05)

        tcfg = te.TrainConfig(epochs=30, lr=3e-3, batch_size=100, patience=5, seed=0)
        _, report = te.train(stream, cfg, tcfg)
        elapsed = time.perf_counter() - start
        assert len(report.epoch_losses) <= 30
        assert report.ap >= 0.85, f"test AP {report.ap:.4f}"
        assert report.auc_roc >= 0.85, f"test AUC {report.auc_roc:.4f}"
        assert elapsed < 300.0, f"took {elapsed:.0f}s"
        print(f"\n  trained AP={report.ap:.4f} AUC={report.auc_roc:.4f} "
              f"untrained AP={ap0:.4f} ({elapsed:.0f}s)", end="")


def test_c6_complexity_separation():
    with criterion(6, "op-count slope: adaptive <= 1.05, attention >= 1.95"):
        results = run_bench([256, 1024, 4096], ["adaptive", "attention"],
                            repeats=1, dim=8, kernel=8, seed=0)
        adaptive = results["adaptive"]["ops_slope"]
        attention = results["attention"]["ops_slope"]
        assert adaptive <= 1.05, f"adaptive ops slope {adaptive:.3f}"
        assert attention >= 1.95, f"attention ops slope {attention:.3f}"
        print(f"\n  ops slopes: adaptive={adaptive:.3f} attention={attention:.3f}; "
              f"wall slopes (reported): adaptive={results['adaptive']['wall_slope']:.2f} "
              f"attention={results['attention']['wall_slope']:.2f}", end="")


def test_c7_invariance_suite(tmp_path):
    with criterion(7, "time-shift bit-invariance, monotone AUC, reproducible JSON"):
        spec = tg.SyntheticSpec(n_src=6, n_dst=6, n_events=400,
                                pattern="periodic", p_repeat=0.9)
        stream = tg.generate_synthetic(spec, seed=7)
        shifted = stream.shift_times(4096.0)
        cfg = md.ModelConfig(dim=8, time_dim=16, spans=(2, 4), mixer="adaptive", n_max=6)
        params = md.init_params(cfg, stream.node_dim, stream.edge_dim, seed=8)
        store, store_shifted = tg.TemporalStore(stream), tg.TemporalStore(shifted)
        for node in range(stream.node_count):
            a = md.node_repr(store, node, 401.0, cfg, params)
            b = md.node_repr(store_shifted, node, 401.0 + 4096.0, cfg, params)
            assert a.tobytes() == b.tobytes()

        rng = np.random.default_rng(9)
        scores = rng.normal(size=200)
        labels = rng.integers(0, 2, size=200).astype(float)
        base = te.auc_roc(scores, labels)
        for f in (np.exp, lambda x: 5 * x - 2, lambda x: x ** 3):
            assert te.auc_roc(f(scores), labels) == pytest.approx(base, abs=1e-12)

        synth = json.dumps({"n_src": 5, "n_dst": 5, "n_events": 300,
                            "pattern": "periodic", "p_repeat": 0.9})
        flags = ["--synthetic", synth, "--dim", "8", "--time-dim", "8", "--spans", "2",
                 "--n-max", "5", "--epochs", "2", "--batch-size", "100",
                 "--lr", "0.003", "--seed", "0"]
        docs = []
        for sub in ("a", "b"):
            assert main(["train", *flags, "--out", str(tmp_path / sub)]) == 0
            doc = json.loads((tmp_path / sub / "metrics.json").read_text())
            for run in doc["runs"]:
                run.pop("timing")
            docs.append(json.dumps(doc, sort_keys=True))
        assert docs[0] == docs[1]


def test_c8_ablation_machinery(tmp_path):
    with criterion(8, "six ablation variants complete; fusion pinned to 0 and 1"):
        synth = json.dumps({"n_src": 5, "n_dst": 5, "n_events": 300,
                            "pattern": "periodic", "p_repeat": 0.9})
        rc = main(["ablate", "--synthetic", synth, "--dim", "8", "--time-dim", "8",
                   "--spans", "2", "--n-max", "5", "--epochs", "2",
                   "--batch-size", "100", "--lr", "0.003", "--seed", "0",
                   "--out", str(tmp_path)])
        assert rc == 0
        doc = json.loads((tmp_path / "ablation.json").read_text())
        assert set(doc["variants"]) == {"full", "no_lp", "no_rt", "relu",
                                        "no_resnet", "no_cm"}
        for variant in doc["variants"]:
            for value in doc["variants"][variant]["ap"]:
                assert 0.0 <= value <= 1.0
        assert md.effective_fusions(
            md.load_checkpoint(tmp_path / "checkpoint_no_lp.json")) == [0.0]
        assert md.effective_fusions(
            md.load_checkpoint(tmp_path / "checkpoint_no_rt.json")) == [1.0]
