"""Ranking metrics for a single held-out item per user."""

from dataclasses import dataclass, field

import numpy as np

from .data import left_pad
from .lru import lambda_of
from .model import ModelParams, encode, score_hidden


@dataclass
class MetricResult:
    recall: dict
    ndcg: dict
    users: int
    mode: str = "full"
    phase: str = "test"
    ranks: np.ndarray | None = field(default=None, repr=False)

    def __getitem__(self, key):
        """``result["recall@10"]`` style access."""
        name, k = key.lower().split("@")
        return {"recall": self.recall, "ndcg": self.ndcg}[name][int(k)]

    def rows(self):
        for k in sorted(self.recall):
            yield (self.phase, self.mode, k, "recall", self.recall[k])
            yield (self.phase, self.mode, k, "ndcg", self.ndcg[k])

    def summary(self):
        out = {"phase": self.phase, "mode": self.mode, "users": self.users}
        for k in sorted(self.recall):
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out


def rank_of_target(scores, target):
    """1-based rank of ``scores[target]``; any other item tying it ranks ahead."""
    scores = np.asarray(scores)
    ahead = np.count_nonzero(scores >= scores[target]) - 1
    return int(ahead) + 1


def ranks_of_targets(scores, targets):
    """Row-wise :func:`rank_of_target` for an (N, V) score matrix."""
    rows = np.arange(len(targets))
    own = scores[rows, targets][:, None]
    return np.count_nonzero(scores >= own, axis=1)


def metrics_at_k(rank, k):
    """``(recall, ndcg)`` at cutoff ``k`` for one target at ``rank``."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    if rank > k:
        return 0.0, 0.0
    return 1.0, float(1.0 / np.log2(rank + 1))


def _scorer(model, split):
    if not isinstance(model, ModelParams):
        return model
    if model.item_count != split.num_items:
        raise ValueError(
            f"vocabulary mismatch: model has {model.item_count} items, split has {split.num_items}"
        )
    if model.vocab_hash is not None and model.vocab_hash != split.vocab_hash:
        raise ValueError(
            f"vocabulary mismatch: model vocab {model.vocab_hash} != split vocab {split.vocab_hash}"
        )

    def score(ids, mask):
        return score_hidden(model, encode(model, ids, mask)[:, -1])

    return score


def _sample_negatives(rng, num_items, target, n):
    """``n`` distinct items from 1..num_items other than ``target``."""
    pool = num_items - 1
    if n >= pool:
        draw = np.arange(pool)
    else:
        draw = rng.choice(pool, size=n, replace=False)
    vals = draw + 1
    vals[vals >= target] += 1
    return vals


def evaluate(model, split, phase="test", negatives=None, rng=None, ks=(10, 20),
             batch_size=256, exclude_history=False):
    """Recall@k / NDCG@k over every user of ``split``.

    ``model`` is a :class:`ModelParams` or any callable mapping
    ``(ids, mask)`` to an (N, num_items + 1) score matrix for the final
    position. With ``negatives=None`` the target is ranked against every
    item; otherwise against ``negatives`` uniformly drawn non-target items
    per user (``rng`` required).
    """
    score = _scorer(model, split)
    if negatives is not None and rng is None:
        raise ValueError("sampled evaluation needs an rng")
    histories = split.inputs(phase)
    targets = np.asarray(split.targets(phase))
    V = split.num_items
    ranks = np.empty(len(targets), dtype=np.int64)
    for lo in range(0, len(targets), batch_size):
        hist = histories[lo:lo + batch_size]
        tgt = targets[lo:lo + batch_size]
        ids = left_pad(hist)
        scores = np.array(score(ids, ids != 0), dtype=float)[:, 1:]
        if exclude_history:
            for r, h in enumerate(hist):
                scores[r, np.asarray(h, dtype=np.int64) - 1] = -np.inf
        t0 = tgt - 1
        if negatives is None:
            ranks[lo:lo + len(tgt)] = ranks_of_targets(scores, t0)
            continue
        for r, t in enumerate(tgt):
            neg = _sample_negatives(rng, V, int(t), negatives) - 1
            ranks[lo + r] = 1 + np.count_nonzero(scores[r, neg] >= scores[r, t0[r]])

    recall, ndcg = {}, {}
    for k in ks:
        hit = ranks <= k
        recall[k] = float(hit.mean()) if len(ranks) else 0.0
        gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        ndcg[k] = float(gains.mean()) if len(ranks) else 0.0
    mode = "full" if negatives is None else f"sampled-{negatives}"
    return MetricResult(recall, ndcg, len(ranks), mode, phase, ranks)


def lambda_report(params):
    """Mean eigenvalue modulus of each block."""
    return [float(np.mean(np.abs(lambda_of(bp.lru)))) for bp in params.blocks]
