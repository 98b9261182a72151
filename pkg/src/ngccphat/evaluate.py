"""Decoding, scoring and the classical peak-picking baseline.

Predictions are scored directly against TDOA ground truth with optimal
per-pair matching, which gives a paired comparison between the learned
model and plain GCC-PHAT peak picking.
"""

import itertools
import json
from dataclasses import dataclass

import numpy as np

from ngccphat.signal_core import gcc_phat, top_k_peaks


@dataclass
class ScoreCard:
    recall_at_1: float
    recall_at_0: float
    mean_abs_lag_error: float
    frames: int

    def to_json(self):
        return json.dumps(
            {
                "recall_at_1": self.recall_at_1,
                "recall_at_0": self.recall_at_0,
                "mean_abs_lag_error": self.mean_abs_lag_error,
                "frames": self.frames,
            },
            sort_keys=True,
        )


def _argmax_lag(row, tau_max):
    """Argmax over the lag axis; ties break toward smaller |lag|, then
    smaller lag."""
    best = None
    for idx in range(row.shape[0]):
        lag = idx - tau_max
        key = (-row[idx], abs(lag), lag)
        if best is None or key < best[0]:
            best = (key, lag, row[idx])
    return best[1], float(best[2])


def decode_tracks(posterior, P_hint=None, threshold=None):
    """Per-pair TDOA predictions from track posteriors.

    Each track contributes its argmax lag with its probability; duplicate
    lags merge keeping the highest confidence. With P_hint, only the
    top-P_hint entries by confidence survive; with a threshold, entries
    below it are dropped.
    """
    n_pairs, k_tracks, n_lags = posterior.shape
    tau_max = (n_lags - 1) // 2
    predictions = []
    for p in range(n_pairs):
        by_lag = {}
        for k in range(k_tracks):
            lag, conf = _argmax_lag(posterior[p, k], tau_max)
            if lag not in by_lag or conf > by_lag[lag]:
                by_lag[lag] = conf
        entries = sorted(by_lag.items(), key=lambda e: (-e[1], abs(e[0]), e[0]))
        if threshold is not None:
            entries = [e for e in entries if e[1] >= threshold]
        if P_hint is not None:
            entries = entries[:P_hint]
        predictions.append(entries)
    return predictions


def match_lags(pred_lags, true_lags):
    """Optimal one-to-one matching minimizing total |error|.

    Exhaustive over permutations (small counts only). Returns a list of
    (pred_lag, true_lag) matched pairs of length min(len(pred), len(true)).
    """
    if not pred_lags or not true_lags:
        return []
    if len(pred_lags) >= len(true_lags):
        longer, shorter, pred_first = pred_lags, true_lags, True
    else:
        longer, shorter, pred_first = true_lags, pred_lags, False
    best, best_cost = None, None
    for perm in itertools.permutations(longer, len(shorter)):
        cost = sum(abs(a - b) for a, b in zip(perm, shorter))
        if best_cost is None or cost < best_cost:
            best_cost = cost
            best = list(zip(perm, shorter))
    if pred_first:
        return best
    return [(b, a) for a, b in best]


def score(predictions, labels, tolerance=1):
    """Score prediction/label streams aligned frame-by-frame.

    predictions: per frame, per pair, list of (lag, confidence);
    labels: per frame, per pair, list of true lags. recall_at_0 counts
    exact matches, recall_at_1 matches within the tolerance.
    """
    predictions = list(predictions)
    labels = list(labels)
    if len(predictions) != len(labels):
        raise ValueError("prediction and label streams are misaligned")
    total_truths = 0
    hits_tol = 0
    hits_exact = 0
    abs_errors = []
    detail = []
    for f_idx, (frame_preds, frame_labels) in enumerate(zip(predictions, labels)):
        if len(frame_preds) != len(frame_labels):
            raise ValueError("pair counts are misaligned")
        for p_idx, (entries, truths) in enumerate(zip(frame_preds, frame_labels)):
            pred_lags = [lag for lag, _ in entries]
            matches = match_lags(pred_lags, list(truths))
            total_truths += len(truths)
            matched_within = 0
            for pred, true in matches:
                err = abs(pred - true)
                if err <= tolerance:
                    hits_tol += 1
                    matched_within += 1
                    abs_errors.append(err)
                if err == 0:
                    hits_exact += 1
            detail.append(
                {
                    "frame": f_idx,
                    "pair": p_idx,
                    "true_lags": list(truths),
                    "pred_lags": pred_lags,
                    "matched": matched_within,
                    "abs_err": [abs(a - b) for a, b in matches],
                }
            )
    card = ScoreCard(
        recall_at_1=hits_tol / total_truths if total_truths else 0.0,
        recall_at_0=hits_exact / total_truths if total_truths else 0.0,
        mean_abs_lag_error=float(np.mean(abs_errors)) if abs_errors else 0.0,
        frames=len(predictions),
    )
    return card, detail


def detail_csv_rows(detail):
    rows = ["frame,pair,true_lags,pred_lags,matched,abs_err"]
    for d in detail:
        true_s = " ".join(str(x) for x in d["true_lags"])
        pred_s = " ".join(str(x) for x in d["pred_lags"])
        err_s = " ".join(str(x) for x in d["abs_err"])
        rows.append(f"{d['frame']},{d['pair']},{true_s},{pred_s},{d['matched']},{err_s}")
    return rows


def gcc_predictions(frame, pairs, tau_max, k_peaks):
    """Top-k peak picking on plain GCC-PHAT for one multichannel frame."""
    preds = []
    for i, j in pairs:
        corr = gcc_phat(frame[i], frame[j], tau_max)
        peaks = top_k_peaks(corr, k_peaks)
        preds.append([(lag, float(np.clip(val, 1e-9, 1.0))) for lag, val in peaks])
    return preds


def gcc_baseline(frames, labels, pairs, tau_max, k_peaks, tolerance=1):
    """Score classical GCC-PHAT peak picking against the same ground truth."""
    predictions = [gcc_predictions(f, pairs, tau_max, k_peaks) for f in frames]
    return score(predictions, labels, tolerance=tolerance)


def doa_least_squares(tdoas, geometry, fs, c=343.0):
    """Far-field DOA from one TDOA per microphone pair.

    Solves tau_ij ~ (Fs/c) (r_j - r_i) . d for the unit direction d.
    tdoas: {(i, j): lag}. Raises on rank-deficient geometry; an all-zero
    solution (symmetric degenerate case) is returned unnormalized.
    """
    pairs = list(tdoas.keys())
    if len(pairs) < 3:
        raise ValueError("need at least 3 microphone pairs")
    rows = np.array(
        [geometry.mic_positions[j] - geometry.mic_positions[i] for i, j in pairs]
    )
    rhs = np.array([tdoas[p] for p in pairs], dtype=float) * c / fs
    if np.linalg.matrix_rank(rows) < 3:
        raise ValueError("geometry is rank-deficient: pair baselines do not span 3D")
    d, *_ = np.linalg.lstsq(rows, rhs, rcond=None)
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return np.zeros(3)
    return d / norm
