"""AdamW training with validation-driven early stopping."""

import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .data import make_batches
from .evaluate import evaluate
from .model import IGNORE, ModelParams, init_model, model_backward, with_vocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 500
    max_iterations: int | None = None
    validate_every: int = 1000
    patience: int = 10
    weight_decay: float = 0.0
    dropout: float = 0.2
    negative_samples: int | None = None
    seed: int = 0
    hidden_dim: int = 64
    num_blocks: int = 2
    max_len: int = 50
    use_layernorm: bool = True
    use_residual: bool = True
    use_pffn: bool = True
    loss_positions: str = "all"
    select_metric: str = "recall@10"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self):
        positive = ("batch_size", "max_epochs", "validate_every", "patience", "hidden_dim",
                    "num_blocks", "max_len")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.negative_samples is not None and self.negative_samples < 1:
            raise ValueError("negative_samples must be >= 1 when set")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1 when set")
        if self.loss_positions not in ("all", "last"):
            raise ValueError("loss_positions must be 'all' or 'last'")
        name, _, k = self.select_metric.partition("@")
        if name not in ("recall", "ndcg") or not k.isdigit() or int(k) < 1:
            raise ValueError(f"select_metric must look like 'recall@10', got {self.select_metric!r}")

    @property
    def select_k(self):
        return int(self.select_metric.split("@")[1])

    @property
    def eval_ks(self):
        return tuple(sorted({10, 20, self.select_k}))


# ------------------------------------------------------------------ AdamW


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    pinned: dict = field(default_factory=lambda: {"E": 0, "b_o": 0})


def _real(a):
    return a.view(a.real.dtype) if np.iscomplexobj(a) else a


def adamw_step(params, grads, opt):
    """One in-place AdamW update with decoupled weight decay.

    ``params`` is a :class:`ModelParams` or a dict of arrays; complex arrays
    are updated through their real views. Rows listed in ``opt.pinned`` (the
    padding row and its bias) are left untouched.
    """
    arrays = params.named_arrays() if isinstance(params, ModelParams) else params
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(bad)}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in arrays.items():
        g = _real(grads[name])
        w = _real(p)
        if name not in opt.m:
            opt.m[name] = np.zeros_like(w)
            opt.v[name] = np.zeros_like(w)
        m, v = opt.m[name], opt.v[name]
        row = opt.pinned.get(name)
        saved = w[row].copy() if row is not None else None
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        if opt.weight_decay:
            w *= 1.0 - opt.lr * opt.weight_decay
        w -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if row is not None:
            w[row] = saved
    return params


# ------------------------------------------------------------------- loss


def sample_candidates(rng, targets, num_items, n):
    """Per-position candidate sets: the target followed by ``n`` distinct negatives.

    Negatives are uniform over 1..num_items without the target. Returns an
    array of shape ``targets.shape + (n + 1,)``.
    """
    flat = np.where(targets.reshape(-1) == IGNORE, 1, targets.reshape(-1)).astype(np.int64)
    m = flat.size
    pool = num_items - 1
    if n >= pool:
        draw = np.broadcast_to(np.arange(pool), (m, pool)).copy()
    elif pool <= 4096:
        draw = np.argpartition(rng.random((m, pool)), n - 1, axis=1)[:, :n]
    else:
        draw = rng.integers(0, pool, size=(m, n))
        srt = np.sort(draw, axis=1)
        dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
        while dup.size:
            draw[dup] = rng.integers(0, pool, size=(dup.size, n))
            srt = np.sort(draw[dup], axis=1)
            dup = dup[(srt[:, 1:] == srt[:, :-1]).any(axis=1)]
    neg = draw + 1
    neg += neg >= flat[:, None]
    out = np.concatenate([flat[:, None], neg], axis=1)
    return out.reshape(targets.shape + (out.shape[1],))


def batch_loss(params, batch, config, rng=None):
    """Mean cross-entropy of a batch and its gradients.

    ``rng`` drives dropout and, in sampled mode, the negatives (required
    when either is active).
    """
    targets = batch.targets
    if config.loss_positions == "last":
        targets = np.full_like(targets, IGNORE)
        targets[:, -1] = batch.targets[:, -1]
    candidates = None
    if config.negative_samples is not None:
        if rng is None:
            raise ValueError("sampled loss needs an rng")
        candidates = sample_candidates(rng, targets, params.item_count, config.negative_samples)
    return model_backward(params, batch.ids, targets, batch.mask, training=rng is not None,
                          rng=rng, candidates=candidates)


# ------------------------------------------------------------------ train


@dataclass
class RoundRecord:
    round: int
    iteration: int
    epoch: int
    metrics: dict
    loss: float
    elapsed: float


@dataclass
class TrainReport:
    rounds: list
    best_round: int
    best_score: float
    stop_reason: str
    iterations: int
    timings: dict
    config: dict

    def deterministic_view(self):
        """The report with wall-clock fields removed."""
        return {
            "rounds": [(r.round, r.iteration, r.epoch, r.metrics, r.loss) for r in self.rounds],
            "best_round": self.best_round,
            "best_score": self.best_score,
            "stop_reason": self.stop_reason,
            "iterations": self.iterations,
        }


def model_from_config(config, split, rng):
    params = init_model(
        split.num_items, config.hidden_dim, config.num_blocks, config.dropout, rng=rng,
        use_layernorm=config.use_layernorm, use_residual=config.use_residual,
        use_pffn=config.use_pffn, dtype=config.dtype,
    )
    return with_vocab(params, split.vocab_hash)


METRIC_COLUMNS = ("round", "iteration", "recall@10", "ndcg@10", "loss", "elapsed")


def train(config, split, rng=None, metrics_file=None, params=None):
    """Fit a model on ``split``; returns ``(report, best_params)``.

    Only validation targets are ever consulted. ``metrics_file`` (an open
    text handle) receives one tab-separated record per validation round.
    """
    if not split.train:
        raise ValueError("cannot train on an empty split")
    view = split.without_test()
    rng = np.random.default_rng(config.seed if rng is None else rng)
    init_rng, batch_rng, drop_rng = (np.random.default_rng(s) for s in rng.integers(2**63, size=3))
    if params is None:
        params = model_from_config(config, view, init_rng)
    opt = OptimizerState(config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    key = config.select_metric

    rounds, best, best_score, bad = [], params.copy(), -np.inf, 0
    best_round, stop, it, losses = 0, "max_epochs", 0, []
    t_start = time.perf_counter()
    t_val = 0.0

    def validate(epoch):
        nonlocal best, best_score, bad, best_round, t_val
        t0 = time.perf_counter()
        res = evaluate(params, view, "validation", ks=config.eval_ks)
        t_val += time.perf_counter() - t0
        rec = RoundRecord(len(rounds) + 1, it, epoch, res.summary(),
                          float(np.mean(losses)) if losses else float("nan"),
                          time.perf_counter() - t_start)
        losses.clear()
        rounds.append(rec)
        if metrics_file is not None:
            vals = (rec.round, rec.iteration, rec.metrics["recall@10"], rec.metrics["ndcg@10"],
                    rec.loss, rec.elapsed)
            metrics_file.write("\t".join(str(v) for v in vals) + "\n")
            metrics_file.flush()
        score = res[key]
        log.info("round %d iter %d %s=%.5f loss=%.4f", rec.round, it, key, score, rec.loss)
        if score > best_score:
            best_score, best, best_round, bad = score, params.copy(), rec.round, 0
            return False
        bad += 1
        return bad >= config.patience

    done = False
    for epoch in range(1, config.max_epochs + 1):
        for batch in make_batches(view, config.batch_size, config.max_len, batch_rng):
            loss, grads = batch_loss(params, batch, config, drop_rng)
            adamw_step(params, grads, opt)
            losses.append(loss)
            it += 1
            if it % config.validate_every == 0 and validate(epoch):
                stop, done = "patience", True
                break
            if config.max_iterations is not None and it >= config.max_iterations:
                stop, done = "max_iterations", True
                break
        if done:
            break
    if not rounds or (stop != "patience" and rounds[-1].iteration != it):
        validate(epoch)

    total = time.perf_counter() - t_start
    report = TrainReport(rounds, best_round, float(best_score), stop, it,
                         {"total": total, "validation": t_val, "optimisation": total - t_val},
                         asdict(config))
    return report, best


def grid_search(base, split, weight_decays=(0.0, 1e-6, 1e-4, 1e-2),
                dropouts=(0.2, 0.4, 0.6, 0.8), rng=None):
    """Train every (weight_decay, dropout) cell; best validation score wins.

    Ties go to the earlier cell. Returns ``(best_config, best_params, cells)``
    with ``cells`` a list of ``(config, report)``.
    """
    cells, best = [], None
    for wd in weight_decays:
        for dr in dropouts:
            cfg = replace(base, weight_decay=wd, dropout=dr)
            cell_rng = None if rng is None else np.random.default_rng(rng.integers(2**63))
            report, params = train(cfg, split, cell_rng)
            cells.append((cfg, report))
            if best is None or report.best_score > best[2]:
                best = (cfg, params, report.best_score)
    if best is None:
        raise ValueError("empty hyperparameter grid")
    return best[0], best[1], cells


def config_fields():
    return {f.name: f for f in fields(TrainConfig)}
