"""End-to-end acceptance gate for the toolkit.

Each test prints one `[criterion N] PASS/FAIL` line (visible with -s and in
failure output) and asserts the stated tolerance. The expensive learning
check (criterion 8) trains once per session; criterion 9 reuses its model.
"""

import itertools
import json
import time

import numpy as np
import pytest

from ngccphat.cli import EXIT_OK, main
from ngccphat.evaluate import decode_tracks, gcc_baseline, score
from ngccphat.model import ModelConfig, NgccPhatModel
from ngccphat.pit import (
    TrainConfig,
    assignment_set,
    labels_to_pair_list,
    pit_loss,
    train_epoch,
)
from ngccphat.scene import DatasetSpec, max_tdoa, sample_dataset, tetrahedral_array
from ngccphat.signal_core import gcc_phat, gcc_phat_direct


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {criterion}] {status} - {detail}")
    assert ok, f"criterion {criterion} failed: {detail}"


@pytest.fixture(scope="module")
def trained():
    """Criterion-8 setup: 1-epoch training run plus a held-out 2-source set."""
    train_spec = DatasetSpec(
        n_frames=3000,
        polyphony_weights={1: 0.2, 2: 0.8},
        snr_db_range=(5.0, 25.0),
        waveform="bandlimited_noise",
    )
    test_spec = DatasetSpec(
        n_frames=300,
        polyphony_weights={2: 1.0},
        snr_db_range=(5.0, 25.0),
        waveform="bandlimited_noise",
    )
    t0 = time.time()
    train_records = list(sample_dataset(train_spec, seed=11))
    test_records = list(sample_dataset(test_spec, seed=99))
    model = NgccPhatModel(ModelConfig(), seed=7)
    train_epoch(model, train_records, TrainConfig(batch_size=8), seed=7)

    pairs = model.config.pairs()
    labels = [labels_to_pair_list(r.labels, pairs) for r in test_records]
    preds = [
        decode_tracks(model.forward(r.audio).posterior, P_hint=2)
        for r in test_records
    ]
    model_card, _ = score(preds, labels, tolerance=1)
    base_card, _ = gcc_baseline(
        [r.audio for r in test_records], labels, pairs, tau_max=6, k_peaks=2,
        tolerance=1,
    )
    return {
        "model": model,
        "test_records": test_records,
        "model_card": model_card,
        "base_card": base_card,
        "elapsed": time.time() - t0,
    }


def test_criterion_01_geometry_constant():
    geo = tetrahedral_array(0.084)
    tau = max_tdoa(geo, 24000.0, 343.0)
    model = NgccPhatModel(ModelConfig(), seed=0)
    shape = model.forward(np.random.default_rng(0).standard_normal((4, 480))).feature.shape
    ok = tau == 6 and shape == (16, 6, 13)
    report(1, ok, f"tau_max={tau}, feature shape={shape} (want 6 and (16, 6, 13))")


def test_criterion_02_gcc_phat_matches_direct_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal(480)
        y = rng.standard_normal(480)
        fast = gcc_phat(x, y, 6).values
        slow = gcc_phat_direct(x, y, 6).values
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    report(2, worst < 1e-9, f"max |fft - direct| = {worst:.2e} over 100 frames (tol 1e-9)")


def test_criterion_03_baseline_sanity():
    spec = DatasetSpec(
        n_frames=1000, polyphony_weights={1: 1.0}, snr_db_range=(20.0, 20.0)
    )
    records = list(sample_dataset(spec, seed=42))
    pairs = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    labels = [labels_to_pair_list(r.labels, pairs) for r in records]
    card, _ = gcc_baseline(
        [r.audio for r in records], labels, pairs, tau_max=6, k_peaks=1
    )
    report(
        3,
        card.recall_at_0 >= 0.95,
        f"single-source anechoic recall_at_0 = {card.recall_at_0:.3f} over 1000 "
        "frames (want >= 0.95)",
    )


def test_criterion_04_gradient_fidelity():
    from ngccphat.cli import _model_grad_check

    spec = DatasetSpec(
        n_frames=8, polyphony_weights={2: 1.0}, snr_db_range=(15.0, 25.0),
        waveform="bandlimited_noise",
    )
    rec = next(iter(sample_dataset(spec, seed=4)))
    model = NgccPhatModel(ModelConfig(), seed=4)

    t0 = time.time()
    result = _model_grad_check(model, [rec], {"seed": 4}, n_probe=25)
    elapsed = time.time() - t0
    ok = result["max_rel_err"] < 1e-4 and elapsed < 120
    report(
        4,
        ok,
        f"full-model grad check max rel err = {result['max_rel_err']:.2e} "
        f"(tol 1e-4), worst={result['worst']['name']}, {elapsed:.0f}s (< 120s)",
    )


def _pit_oracle(posterior, labels, P):
    n_pairs, K, n_lags = posterior.shape
    tau = (n_lags - 1) // 2
    if P == K:
        maps = list(itertools.permutations(range(P)))
    elif P < K:
        maps = [
            a for a in itertools.product(range(P), repeat=K)
            if set(a) == set(range(P))
        ]
    else:
        maps = list(itertools.permutations(range(P), K))
    per_pair = []
    for p in range(n_pairs):
        per_pair.append(min(
            -sum(np.log(posterior[p, k, labels[p][a[k]] + tau]) for k in range(K)) / K
            for a in maps
        ))
    return float(np.mean(per_pair))


def test_criterion_05_pit_loss_oracle():
    from ngccphat.autodiff import softmax

    rng = np.random.default_rng(5)
    worst = 0.0
    invariant = True
    for trial in range(200):
        P = int(rng.integers(1, 4))
        post = softmax(rng.standard_normal((6, 3, 13)) * 2, axis=2)
        labels = [rng.integers(-6, 7, size=P).tolist() for _ in range(6)]
        got = pit_loss(post, labels, P).total
        worst = max(worst, abs(got - _pit_oracle(post, labels, P)))
        perm = rng.permutation(P)
        shuffled = [[row[e] for e in perm] for row in labels]
        if pit_loss(post, shuffled, P).total != got:
            invariant = False
    ok = worst < 1e-10 and invariant
    report(
        5,
        ok,
        f"max |pit - oracle| = {worst:.2e} over 200 instances (tol 1e-10), "
        f"label-order invariant = {invariant}",
    )


def test_criterion_06_assignment_counts():
    counts = {P: len(assignment_set(P, 3)) for P in (3, 2, 1)}
    ok = counts == {3: 6, 2: 6, 1: 1}
    report(6, ok, f"|assignments| for K=3: {counts} (want {{3: 6, 2: 6, 1: 1}})")


def test_criterion_07_shift_equivariance():
    model = NgccPhatModel(ModelConfig(), seed=7)
    rng = np.random.default_rng(7)
    exact = True
    for _ in range(50):
        x = rng.standard_normal(480)
        shift = int(rng.integers(-240, 241))
        shifted = model.filterbank_forward(np.roll(x, shift))
        rolled = np.roll(model.filterbank_forward(x), shift, axis=1)
        if not np.array_equal(shifted, rolled):
            exact = False
            break
    report(7, exact, "filter bank commutes with circular shifts bit-exactly "
                     "over 50 trials" if exact else "bit-level mismatch found")


def test_criterion_08_learning_outcome(trained):
    model_r = trained["model_card"].recall_at_1
    base_r = trained["base_card"].recall_at_1
    margin = model_r - base_r
    ok = margin >= 0.05 and trained["elapsed"] < 600
    report(
        8,
        ok,
        f"2-source recall_at_1: model {model_r:.3f} vs baseline {base_r:.3f} "
        f"(margin {margin * 100:+.1f} pp, want >= +5 pp) in "
        f"{trained['elapsed']:.0f}s (< 600s)",
    )


def test_criterion_09_two_track_qualitative(trained):
    model = trained["model"]
    pairs = model.config.pairs()
    found = None
    for rec in trained["test_records"]:
        labels = labels_to_pair_list(rec.labels, pairs)
        separated = sum(
            1 for lagz in labels if abs(lagz[0] - lagz[1]) >= 3
        )
        if separated < 5:
            continue
        preds = decode_tracks(model.forward(rec.audio).posterior, P_hint=2)
        good_pairs = 0
        for entries, lagz in zip(preds, labels):
            if lagz[0] == lagz[1]:
                continue
            pred_lags = [lag for lag, _ in entries]
            if len(pred_lags) >= 2 and all(
                min(abs(p - t) for p in pred_lags) <= 1 for t in lagz
            ):
                good_pairs += 1
        if good_pairs >= 4:
            found = good_pairs
            break
    report(
        9,
        found is not None,
        f"two decoded tracks hit both truths within +-1 on {found} of 6 pairs "
        "of a well-separated 2-source frame (want >= 4)"
        if found is not None
        else "no well-separated frame decoded with >= 4 good pairs",
    )


def test_criterion_10_pipeline_determinism(tmp_path):
    t0 = time.time()
    artifacts = []
    for run in range(2):
        out_dir = tmp_path / f"run{run}"
        config = tmp_path / f"config{run}.json"
        config.write_text(json.dumps({
            "seed": 10,
            "out_dir": str(out_dir),
            "dataset": {
                "n_frames": 200,
                "polyphony_weights": {"1": 0.3, "2": 0.7},
                "snr_db_range": [5.0, 25.0],
                "waveform": "bandlimited_noise",
            },
            "training": {"batch_size": 8},
        }))
        assert main(["simulate", "--config", str(config)]) == EXIT_OK
        assert main(["train", "--config", str(config)]) == EXIT_OK
        assert main(["eval", "--config", str(config)]) == EXIT_OK
        artifacts.append({
            "checkpoint": (out_dir / "train" / "checkpoint.ngcp").read_bytes(),
            "model_card": (out_dir / "eval" / "model_scorecard.json").read_text(),
            "base_card": (out_dir / "eval" / "baseline_scorecard.json").read_text(),
        })
    same = all(artifacts[0][k] == artifacts[1][k] for k in artifacts[0])
    elapsed = time.time() - t0
    ok = same and elapsed < 900
    report(
        10,
        ok,
        f"two seeded simulate->train->eval runs byte-identical = {same} "
        f"in {elapsed:.0f}s (< 900s)",
    )
