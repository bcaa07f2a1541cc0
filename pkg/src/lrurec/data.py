"""Interaction logs to leave-last-out splits and left-padded batches."""

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .lru import next_pow2
from .model import IGNORE

MANIFEST_FORMAT = "lrurec-split/1"


class InteractionParseError(ValueError):
    def __init__(self, problems):
        self.problems = problems
        shown = "; ".join(f"line {n}: {msg}" for n, msg in problems[:10])
        more = f" (+{len(problems) - 10} more)" if len(problems) > 10 else ""
        super().__init__(f"{len(problems)} malformed record(s): {shown}{more}")


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int


def parse_interactions(lines, delimiter=",", columns=(0, 1, 2), skip_header=False):
    """Parse delimited ``user, item, timestamp`` records, keeping input order.

    ``columns`` gives the field positions of user, item and timestamp, so
    e.g. MovieLens ``ratings.dat`` is read with ``delimiter="::"`` and
    ``columns=(0, 1, 3)``. Blank lines are skipped.
    """
    if isinstance(lines, str):
        lines = lines.splitlines()
    out, problems = [], []
    width = max(columns) + 1
    for lineno, line in enumerate(lines, start=1):
        if skip_header and lineno == 1:
            continue
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split(delimiter)
        if len(fields) < width:
            problems.append((lineno, f"expected at least {width} fields, got {len(fields)}"))
            continue
        user, item, ts = (fields[c].strip() for c in columns)
        try:
            stamp = int(ts)
        except ValueError:
            try:
                as_float = float(ts)
            except ValueError:
                problems.append((lineno, f"non-numeric timestamp {ts!r}"))
                continue
            if not as_float.is_integer():
                problems.append((lineno, f"non-integer timestamp {ts!r}"))
                continue
            stamp = int(as_float)
        if not user or not item:
            problems.append((lineno, "empty user or item id"))
            continue
        out.append(Interaction(user, item, stamp))
    if problems:
        raise InteractionParseError(problems)
    return out


def read_interactions(path, delimiter=",", columns=(0, 1, 2), skip_header=False):
    with open(path, encoding="utf-8", errors="replace") as fh:
        return parse_interactions(fh, delimiter, columns, skip_header)


def filter_min_interactions(log, min_count=5):
    """One items-then-users pass; deliberately not iterated to a k-core."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    item_counts = Counter(r.item for r in log)
    kept = [r for r in log if item_counts[r.item] >= min_count]
    user_counts = Counter(r.user for r in kept)
    return [r for r in kept if user_counts[r.user] >= min_count]


@dataclass
class SplitDataset:
    """Per-user sequences of re-indexed items (ids 1..num_items).

    ``test_targets`` is ``None`` on views handed to the trainer.
    """

    users: list
    train: list  # list of int lists
    val_targets: np.ndarray
    test_targets: np.ndarray | None
    item_ids: list  # raw id of item i at position i - 1
    max_len: int
    meta: dict = field(default_factory=dict)

    @property
    def num_items(self):
        return len(self.item_ids)

    @property
    def num_users(self):
        return len(self.users)

    @property
    def vocab_hash(self):
        return hashlib.sha256("\n".join(self.item_ids).encode()).hexdigest()[:16]

    def item_index(self):
        return {raw: i + 1 for i, raw in enumerate(self.item_ids)}

    def inputs(self, phase):
        """History fed to the model when predicting ``phase``'s target."""
        if phase == "validation":
            return [seq[-self.max_len:] for seq in self.train]
        if phase == "test":
            if self.test_targets is None:
                raise PermissionError("test targets are not available on this split view")
            return [(seq + [int(v)])[-self.max_len:] for seq, v in zip(self.train, self.val_targets)]
        raise ValueError(f"unknown phase {phase!r}")

    def targets(self, phase):
        if phase == "validation":
            return self.val_targets
        if phase == "test":
            if self.test_targets is None:
                raise PermissionError("test targets are not available on this split view")
            return self.test_targets
        raise ValueError(f"unknown phase {phase!r}")

    def without_test(self):
        return SplitDataset(self.users, self.train, self.val_targets, None, self.item_ids,
                            self.max_len, dict(self.meta))

    # -- persistence

    def to_manifest(self):
        if self.test_targets is None:
            raise ValueError("cannot persist a split without test targets")
        return {
            "format": MANIFEST_FORMAT,
            "max_len": self.max_len,
            "meta": self.meta,
            "vocab_hash": self.vocab_hash,
            "items": self.item_ids,
            "users": [
                {"user": u, "train": s, "val": int(v), "test": int(t)}
                for u, s, v, t in zip(self.users, self.train, self.val_targets, self.test_targets)
            ],
        }

    @classmethod
    def from_manifest(cls, doc):
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"unsupported split manifest format {doc.get('format')!r}")
        rows = doc["users"]
        split = cls(
            [r["user"] for r in rows], [list(r["train"]) for r in rows],
            np.array([r["val"] for r in rows], dtype=np.int64),
            np.array([r["test"] for r in rows], dtype=np.int64),
            list(doc["items"]), int(doc["max_len"]), dict(doc.get("meta", {})),
        )
        if split.vocab_hash != doc.get("vocab_hash"):
            raise ValueError("split manifest vocabulary hash does not match its item list")
        return split

    def save(self, path, header=None):
        doc = self.to_manifest()
        if header:
            doc = {**header, **doc}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_manifest(json.load(fh))


def build_split(log, max_len=50):
    """Chronological per-user sequences split leave-last-out.

    Each user keeps their ``max_len + 2`` most recent interactions: the last
    is the test target, the one before it the validation target, and the
    rest (at most ``max_len``) the training sequence. Users with fewer than
    three interactions are dropped. Item ids are re-indexed to 1..|I| in
    order of first appearance among surviving users.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    per_user = {}
    for pos, r in enumerate(log):
        per_user.setdefault(r.user, []).append((r.timestamp, pos, r.item))
    users, seqs = [], []
    for user, events in per_user.items():
        if len(events) < 3:
            continue
        events.sort(key=lambda e: (e[0], e[1]))
        users.append(user)
        seqs.append([item for _, _, item in events])

    index = {}
    for seq in seqs:
        for item in seq:
            if item not in index:
                index[item] = len(index) + 1
    train, val, test = [], [], []
    for seq in seqs:
        ids = [index[i] for i in seq[-(max_len + 2):]]
        train.append(ids[:-2])
        val.append(ids[-2])
        test.append(ids[-1])
    return SplitDataset(users, train, np.array(val, dtype=np.int64), np.array(test, dtype=np.int64),
                        list(index), max_len)


def split_from_sequences(sequences, max_len=50):
    """Build a split straight from ordered item sequences (one per user)."""
    log = [Interaction(str(u), str(item), t) for u, seq in enumerate(sequences)
           for t, item in enumerate(seq)]
    return build_split(log, max_len)


@dataclass
class Batch:
    ids: np.ndarray  # (N, L') left-padded with 0
    mask: np.ndarray  # (N, L') True at real items
    targets: np.ndarray  # (N, L') next item, IGNORE at pads
    lengths: np.ndarray  # (N,)
    rows: np.ndarray  # indices into the training example list


def left_pad(seqs, length=None, pad=0):
    """Stack variable-length sequences right-aligned into a (N, L') matrix."""
    longest = max((len(s) for s in seqs), default=0)
    length = next_pow2(max(longest, 1)) if length is None else length
    out = np.full((len(seqs), length), pad, dtype=np.int64)
    for r, s in enumerate(seqs):
        if len(s):
            out[r, length - len(s):] = s
    return out


def training_examples(split):
    """(input, target) pairs: each training sequence predicts its own next items."""
    inputs, targets = [], []
    for seq in split.train:
        if len(seq) >= 2:
            inputs.append(seq[:-1])
            targets.append(seq[1:])
    return inputs, targets


def make_batches(split, batch_size, max_len, rng):
    """One shuffled epoch of training batches.

    Each batch is padded to the next power of two of its longest row.
    """
    inputs, targets = training_examples(split)
    order = rng.permutation(len(inputs))
    for lo in range(0, len(order), batch_size):
        rows = order[lo:lo + batch_size]
        xs = [inputs[r][-max_len:] for r in rows]
        ts = [targets[r][-max_len:] for r in rows]
        ids = left_pad(xs)
        mask = ids != 0
        tgt = left_pad(ts, ids.shape[1], pad=IGNORE)
        yield Batch(ids, mask, tgt, np.array([len(x) for x in xs]), rows)
