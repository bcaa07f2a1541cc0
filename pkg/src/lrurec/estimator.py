"""scikit-learn style wrapper around training and inference."""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import SplitDataset, left_pad
from .model import encode, score_hidden, top_k, with_vocab
from .train import TrainConfig, train


def check_sequences(X, min_length=1, name="X"):
    """Validate a collection of item sequences and return it as a list of lists.

    Each entry must be a non-string iterable of hashable item ids with at
    least ``min_length`` elements.
    """
    if X is None or isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a collection of item sequences, got {type(X).__name__}")
    seqs = []
    for i, s in enumerate(X):
        if isinstance(s, (str, bytes)):
            raise TypeError(f"{name}[{i}] is a string; pass a list of item ids")
        try:
            s = list(s)
        except TypeError:
            raise TypeError(f"{name}[{i}] is not a sequence of item ids") from None
        if len(s) < min_length:
            raise ValueError(f"{name}[{i}] has {len(s)} item(s), need at least {min_length}")
        seqs.append(s)
    if not seqs:
        raise ValueError(f"{name} is empty")
    return seqs


class LRURecommender(BaseEstimator):
    """Next-item recommender over sequences of arbitrary hashable item ids.

    ``fit`` holds out the last item of every sequence as its validation
    target for early stopping and trains on the rest.
    """

    def __init__(self, hidden_dim=64, num_blocks=2, dropout=0.2, lr=1e-3, weight_decay=0.0,
                 batch_size=128, max_len=50, max_epochs=500, max_iterations=None,
                 validate_every=1000, patience=10, negative_samples=None,
                 select_metric="recall@10", random_state=0):
        self.hidden_dim = hidden_dim
        self.num_blocks = num_blocks
        self.dropout = dropout
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_len = max_len
        self.max_epochs = max_epochs
        self.max_iterations = max_iterations
        self.validate_every = validate_every
        self.patience = patience
        self.negative_samples = negative_samples
        self.select_metric = select_metric
        self.random_state = random_state

    def _config(self):
        params = self.get_params()
        seed = params.pop("random_state")
        return TrainConfig(seed=0 if seed is None else int(seed), **params)

    def fit(self, X, y=None):
        seqs = check_sequences(X, min_length=2)
        config = self._config()
        items, index = [], {}
        for s in seqs:
            for item in s:
                if item not in index:
                    index[item] = len(items) + 1
                    items.append(item)
        coded = [[index[i] for i in s[-(config.max_len + 1):]] for s in seqs]
        last = np.array([c[-1] for c in coded], dtype=np.int64)
        split = SplitDataset(list(range(len(coded))), [c[:-1] for c in coded], last, last,
                             [str(i) for i in items], config.max_len)
        self.report_, params = train(config, split)
        self.params_ = with_vocab(params, split.vocab_hash)
        self.items_ = np.array(items, dtype=object)
        self.index_ = index
        self.n_items_ = len(items)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this LRURecommender is not fitted yet; call fit first")

    def _encode(self, X):
        self._check_fitted()
        seqs = check_sequences(X)
        coded = []
        for i, s in enumerate(seqs):
            unknown = [item for item in s if item not in self.index_]
            if unknown:
                raise ValueError(f"X[{i}] contains item(s) not seen during fit: {unknown[:5]}")
            coded.append([self.index_[item] for item in s][-self.max_len:])
        ids = left_pad(coded)
        return encode(self.params_, ids, ids != 0)[:, -1]

    def transform(self, X):
        """Final-position hidden vector of each history, shape (n, hidden_dim)."""
        return self._encode(X)

    def decision_function(self, X):
        """Scores over ``items_`` for the next item after each history."""
        h = self._encode(X)
        return score_hidden(self.params_, h)[:, 1:]

    def predict(self, X, k=10, exclude_seen=False):
        """The ``k`` highest-scoring next items per history, best first."""
        scores = self.decision_function(X)
        if exclude_seen:
            for r, s in enumerate(check_sequences(X)):
                scores[r, [self.index_[i] - 1 for i in s]] = -np.inf
        idx, _ = top_k(scores, k)
        return self.items_[idx]

    def score(self, X, y=None, k=10):
        """Recall@k of predicting each sequence's last item from the rest."""
        seqs = check_sequences(X, min_length=2)
        hits = [t in row for t, row in zip((s[-1] for s in seqs),
                                           self.predict([s[:-1] for s in seqs], k))]
        return float(np.mean(hits))
