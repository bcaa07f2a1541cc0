"""First-order Markov chain interaction data with a known Bayes rate."""

from dataclasses import dataclass

import numpy as np

from .data import split_from_sequences


@dataclass
class MarkovTask:
    transition: np.ndarray  # (V, V), rows sum to one, 0-based item index
    sequences: list  # per-user lists of 1-based item ids

    @property
    def num_items(self):
        return self.transition.shape[0]

    def split(self, max_len=50):
        return split_from_sequences(self.sequences, max_len)

    def bayes_recall_at_1(self, split, phase="test"):
        """Expected Recall@1 of predicting ``argmax P[last item]``."""
        hist = split.inputs(phase)
        # split re-indexes items; map back to the generator's ids
        raw = np.array([int(x) for x in split.item_ids])
        last = np.array([raw[h[-1] - 1] for h in hist]) - 1
        return float(self.transition[last].max(axis=1).mean())

    def bayes_hits(self, split, phase="test"):
        """Realised Recall@1 of the Bayes-optimal predictor on ``split``."""
        hist = split.inputs(phase)
        raw = np.array([int(x) for x in split.item_ids])
        last = np.array([raw[h[-1] - 1] for h in hist]) - 1
        target = raw[np.asarray(split.targets(phase)) - 1] - 1
        return float(np.mean(self.transition[last].argmax(axis=1) == target))


def markov_task(num_items=20, num_users=2000, length=20, concentration=0.3, rng=None):
    """Sample a random transition matrix and user sequences from it."""
    rng = np.random.default_rng(rng)
    P = rng.dirichlet(np.full(num_items, concentration), size=num_items)
    cum = np.cumsum(P, axis=1)
    state = rng.integers(0, num_items, size=num_users)
    seqs = np.empty((num_users, length), dtype=np.int64)
    seqs[:, 0] = state
    for t in range(1, length):
        u = rng.random(num_users)
        state = np.minimum((cum[state] < u[:, None]).sum(axis=1), num_items - 1)
        seqs[:, t] = state
    return MarkovTask(P, [list(row + 1) for row in seqs])


def popularity_scores(split):
    """Score function ranking items by training-set frequency (ignores history)."""
    counts = np.zeros(split.num_items + 1)
    for seq in split.train:
        np.add.at(counts, np.asarray(seq, dtype=np.int64), 1.0)
    counts[0] = -np.inf

    def score(ids, mask):
        return np.broadcast_to(counts, (ids.shape[0], counts.size)).copy()

    return score
