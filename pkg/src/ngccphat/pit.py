"""Permutation-invariant TDOA classification loss with auxiliary duplication.

Tracks are matched to events by minimizing the average cross-entropy over
all valid track->event assignments: all K! permutations when P = K, all
surjective maps when P < K (every event covered, duplicates fill the rest),
and all C(P, K) subsets x K! orderings when P > K. Frames with P = 0 carry
no labels and are discarded (but counted).
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from ngccphat.autodiff import Adam, NonFiniteError


def assignment_set(P, K):
    """All valid track->event maps (tuples of event indices, length K)."""
    if P < 0 or K < 1:
        raise ValueError("need P >= 0 and K >= 1")
    if P == 0:
        return []
    if P == K:
        return [tuple(p) for p in itertools.permutations(range(K))]
    if P < K:
        return [
            a
            for a in itertools.product(range(P), repeat=K)
            if len(set(a)) == P
        ]
    # P > K: every K-subset of events in every order
    out = []
    for subset in itertools.combinations(range(P), K):
        out.extend(itertools.permutations(subset))
    return out


def assignment_loss(probs, labels, assignment, tau_max):
    """Average cross-entropy of one pair's K tracks against assigned labels."""
    k_tracks = probs.shape[0]
    total = 0.0
    for k in range(k_tracks):
        lag = labels[assignment[k]]
        if abs(lag) > tau_max:
            raise ValueError(f"label lag {lag} outside +-{tau_max}")
        total -= np.log(probs[k, lag + tau_max])
    return total / k_tracks


@dataclass
class LossReport:
    total: float
    per_pair: np.ndarray
    chosen_assignment: list  # one track->event tuple per pair
    frames_used: int
    frames_discarded: int


def pit_loss(posterior, labels, P, global_assignment=False):
    """Minimum-assignment loss for one frame.

    posterior: [pairs, K, 2*tau_max+1]; labels: per-pair lists of P lags,
    aligned with the posterior's pair axis. The assignment minimization is
    independent per pair by default (a literal reading of the per-pair
    minimum); `global_assignment` selects one assignment for all pairs.
    """
    n_pairs, k_tracks, n_lags = posterior.shape
    tau_max = (n_lags - 1) // 2
    if P == 0:
        return LossReport(0.0, np.zeros(n_pairs), [None] * n_pairs, 0, 1)
    assignments = assignment_set(P, k_tracks)

    losses = np.empty((n_pairs, len(assignments)))
    for p in range(n_pairs):
        for a_idx, a in enumerate(assignments):
            losses[p, a_idx] = assignment_loss(posterior[p], labels[p], a, tau_max)
    if global_assignment:
        best = int(np.argmin(losses.sum(axis=0)))
        chosen = [best] * n_pairs
    else:
        chosen = [int(np.argmin(losses[p])) for p in range(n_pairs)]
    per_pair = np.array([losses[p, chosen[p]] for p in range(n_pairs)])
    return LossReport(
        total=float(per_pair.mean()),
        per_pair=per_pair,
        chosen_assignment=[assignments[c] for c in chosen],
        frames_used=1,
        frames_discarded=0,
    )


def pit_loss_grad_logits(posterior, labels, report):
    """dLoss/dlogits [pairs, K, lags] for the argmin assignments of a frame."""
    n_pairs, k_tracks, n_lags = posterior.shape
    tau_max = (n_lags - 1) // 2
    grad = posterior.copy()
    for p in range(n_pairs):
        a = report.chosen_assignment[p]
        for k in range(k_tracks):
            grad[p, k, labels[p][a[k]] + tau_max] -= 1.0
    return grad / (k_tracks * n_pairs)


def labels_to_pair_list(label_dict, pairs):
    """Order a {(i, j): lags} dict along a fixed pair list."""
    return [list(label_dict[p]) for p in pairs]


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    shuffle: bool = True
    global_assignment: bool = False

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EpochStats:
    batches: list = field(default_factory=list)  # JSON-able per-batch records
    frames_used: int = 0
    frames_discarded: int = 0
    initial_loss: float = float("nan")
    final_loss: float = float("nan")

    def log_lines(self):
        return [json.dumps(b, sort_keys=True) for b in self.batches]


def _select_labels(labels, P, K, rng):
    """Random K-of-P event selection when polyphony exceeds the track count."""
    if P <= K:
        return labels, P
    keep = sorted(rng.choice(P, size=K, replace=False).tolist())
    return [[row[e] for e in keep] for row in labels], K


def train_epoch(model, records, train_config, seed):
    """One training pass over the records; returns EpochStats.

    The model is updated in place with Adam at a constant learning rate.
    Frames with no events are skipped (and counted); frames with more
    events than tracks get a random track-count subset of labels.
    """
    cfg = train_config
    pairs = model.config.pairs()
    k_tracks = model.config.tracks
    optimizer = Adam(
        model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
        eps=cfg.adam_eps,
    )
    rng = np.random.default_rng(seed)
    stats = EpochStats()
    step = 0
    running = None
    for epoch in range(cfg.epochs):
        order = np.arange(len(records))
        if cfg.shuffle:
            rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [records[i] for i in order[start : start + cfg.batch_size]]
            optimizer.zero_grad()
            used = 0
            batch_loss = 0.0
            for rec in batch:
                if rec.polyphony == 0:
                    stats.frames_discarded += 1
                    continue
                labels = labels_to_pair_list(rec.labels, pairs)
                labels, p_eff = _select_labels(labels, rec.polyphony, k_tracks, rng)
                out = model.forward(rec.audio)
                report = pit_loss(
                    out.posterior, labels, p_eff,
                    global_assignment=cfg.global_assignment,
                )
                grad = pit_loss_grad_logits(out.posterior, labels, report)
                model.backward(grad, out.cache)
                batch_loss += report.total
                used += 1
                stats.frames_used += 1
            if used == 0:
                continue
            batch_loss /= used
            if not np.isfinite(batch_loss):
                norms = {n: float(np.linalg.norm(v)) for n, v, _ in model.parameters()}
                raise NonFiniteError(
                    f"non-finite loss at batch starting {start}; param norms {norms}"
                )
            for _, _, grad_buf in model.parameters():
                grad_buf /= used
            optimizer.step()
            step += 1
            model.step_count = step
            running = (
                batch_loss if running is None else 0.9 * running + 0.1 * batch_loss
            )
            if np.isnan(stats.initial_loss):
                stats.initial_loss = batch_loss
            stats.batches.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "loss": batch_loss,
                    "running_loss": running,
                    "frames_discarded": stats.frames_discarded,
                    "lr": cfg.lr,
                }
            )
    if stats.batches:
        stats.final_loss = stats.batches[-1]["running_loss"]
    return stats
