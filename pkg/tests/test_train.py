import math

import numpy as np
import pytest

from lrurec.data import Batch, SplitDataset, make_batches, split_from_sequences
from lrurec.model import IGNORE, init_model, model_backward, with_vocab
from lrurec.synthetic import markov_task
from lrurec.train import (
    OptimizerState,
    TrainConfig,
    adamw_step,
    batch_loss,
    grid_search,
    sample_candidates,
    train,
)

TINY = dict(hidden_dim=8, num_blocks=1, batch_size=32, validate_every=10, max_iterations=30,
            dropout=0.1)


@pytest.fixture(scope="module")
def small_split():
    return markov_task(num_items=12, num_users=120, length=10, rng=3).split()


# ----------------------------------------------------------------- AdamW


def test_adamw_zero_gradient_identity():
    p = init_model(10, 4, rng=0)
    before = p.digest()
    adamw_step(p, {k: np.zeros_like(v) for k, v in p.named_arrays().items()}, OptimizerState())
    assert p.digest() == before


def test_adamw_first_step_scalar():
    params = {"p": np.array([0.0])}
    opt = OptimizerState(lr=0.1, pinned={})
    adamw_step(params, {"p": np.array([1.0])}, opt)
    assert abs(params["p"][0] + 0.1) < 1e-8


def test_adamw_decoupled_decay():
    params = {"p": np.array([1.0])}
    opt = OptimizerState(lr=0.1, weight_decay=0.01, pinned={})
    adamw_step(params, {"p": np.array([0.0])}, opt)
    assert abs(params["p"][0] - 0.999) < 1e-15


def test_adamw_pins_padding_rows():
    p = init_model(10, 4, rng=0)
    grads = {k: np.ones_like(v) for k, v in p.named_arrays().items()}
    adamw_step(p, grads, OptimizerState(lr=0.1, weight_decay=0.1))
    assert not p.E[0].any() and p.b_o[0] == 0.0
    assert p.E[1].any()


def test_adamw_complex_arrays_update_componentwise():
    z = np.array([0.5 + 0.25j, -1.0 - 2.0j])
    g = np.array([1.0 - 3.0j, 0.2 + 0.1j])
    re, im = {"x": z.real.copy()}, {"x": z.imag.copy()}
    params = {"x": z.copy()}
    for target, grad in ((params, g), (re, g.real), (im, g.imag)):
        opt = OptimizerState(lr=0.1, weight_decay=0.01, pinned={})
        for _ in range(3):
            adamw_step(target, {"x": grad}, opt)
    np.testing.assert_array_equal(params["x"].real, re["x"])
    np.testing.assert_array_equal(params["x"].imag, im["x"])


def test_adamw_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="p"):
        adamw_step({"p": np.zeros(2)}, {"p": np.array([1.0, np.nan])}, OptimizerState(pinned={}))


# ----------------------------------------------------------------- loss


def _batch_from(seqs, targets):
    from lrurec.data import left_pad
    ids = left_pad(seqs)
    return Batch(ids, ids != 0, left_pad(targets, ids.shape[1], IGNORE),
                 np.array([len(s) for s in seqs]), np.arange(len(seqs)))


def test_untrained_loss_near_uniform():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(1, 301, size=12)) for _ in range(8)]
    batch = _batch_from([s[:-1] for s in seqs], [s[1:] for s in seqs])
    p = init_model(300, 16, rng=1)
    loss, _ = batch_loss(p, batch, TrainConfig(dropout=0.0))
    assert abs(loss - math.log(300)) < 0.05


def test_sampled_loss_near_log_101():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(1, 301, size=12)) for _ in range(8)]
    batch = _batch_from([s[:-1] for s in seqs], [s[1:] for s in seqs])
    p = init_model(300, 16, rng=1)
    cfg = TrainConfig(dropout=0.0, negative_samples=100)
    loss, _ = batch_loss(p, batch, cfg, np.random.default_rng(2))
    assert abs(loss - math.log(101)) < 0.05
    with pytest.raises(ValueError):
        batch_loss(p, batch, cfg)


def test_full_loss_gradients_are_model_backward():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(1, 21, size=k)) for k in (5, 9, 3)]
    batch = _batch_from([s[:-1] for s in seqs], [s[1:] for s in seqs])
    p = init_model(20, 8, rng=1)
    loss, grads = batch_loss(p, batch, TrainConfig(dropout=0.0))
    ref_loss, ref = model_backward(p, batch.ids, batch.targets, batch.mask)
    assert loss == ref_loss
    assert all(np.array_equal(grads[k], ref[k]) for k in ref)


def test_last_position_loss_uses_final_target_only():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(1, 21, size=6)) for _ in range(3)]
    batch = _batch_from([s[:-1] for s in seqs], [s[1:] for s in seqs])
    p = init_model(20, 8, rng=1)
    loss, _ = batch_loss(p, batch, TrainConfig(dropout=0.0, loss_positions="last"))
    only = np.full_like(batch.targets, IGNORE)
    only[:, -1] = batch.targets[:, -1]
    assert loss == model_backward(p, batch.ids, only, batch.mask)[0]


def test_dominant_target_logit_gives_small_losses():
    rng = np.random.default_rng(0)
    seqs = [list(rng.integers(1, 201, size=6)) for _ in range(4)]
    batch = _batch_from(seqs, [[7] * 6 for _ in seqs])
    p = init_model(200, 8, rng=1)
    p.b_o[7] = 30.0
    full, _ = batch_loss(p, batch, TrainConfig(dropout=0.0))
    sampled, _ = batch_loss(p, batch, TrainConfig(dropout=0.0, negative_samples=50),
                            np.random.default_rng(3))
    assert full < 0.01 and sampled < 0.01


@pytest.mark.parametrize("num_items", [30, 6000])
def test_sample_candidates(num_items):
    rng = np.random.default_rng(0)
    targets = np.array([[IGNORE, 3, num_items], [1, 2, 5]])
    cand = sample_candidates(rng, targets, num_items, 20)
    assert cand.shape == (2, 3, 21)
    real = targets != IGNORE
    assert np.array_equal(cand[..., 0][real], targets[real])
    for row in cand.reshape(-1, 21):
        assert len(set(row.tolist())) == 21
        assert row.min() >= 1 and row.max() <= num_items


def test_sample_candidates_exhaustive():
    cand = sample_candidates(np.random.default_rng(0), np.array([[2]]), 5, 10)
    assert sorted(cand[0, 0].tolist()) == [1, 2, 3, 4, 5] and cand[0, 0, 0] == 2


# ---------------------------------------------------------------- train


def test_frozen_parameters_stop_after_two_rounds(small_split):
    cfg = TrainConfig(**{**TINY, "max_iterations": None, "lr": 0.0, "patience": 1})
    report, _ = train(cfg, small_split)
    assert report.stop_reason == "patience"
    assert len(report.rounds) == 2 and report.best_round == 1


def test_identical_seeds_identical_reports(small_split):
    cfg = TrainConfig(**TINY)
    a, pa = train(cfg, small_split)
    b, pb = train(cfg, small_split)
    assert a.deterministic_view() == b.deterministic_view()
    assert pa.digest() == pb.digest()
    c, _ = train(TrainConfig(**{**TINY, "seed": 1}), small_split)
    assert c.deterministic_view() != a.deterministic_view()


def test_train_stops_on_iteration_budget(small_split, tmp_path):
    with open(tmp_path / "m.tsv", "w") as fh:
        report, _ = train(TrainConfig(**TINY), small_split, metrics_file=fh)
    assert report.stop_reason == "max_iterations" and report.iterations == 30
    lines = (tmp_path / "m.tsv").read_text().splitlines()
    assert len(lines) == len(report.rounds) == 3
    assert [int(line.split("\t")[1]) for line in lines] == [10, 20, 30]


def test_trainer_never_reads_test_targets(small_split, monkeypatch):
    phases = []
    original_targets, original_inputs = SplitDataset.targets, SplitDataset.inputs
    monkeypatch.setattr(SplitDataset, "targets",
                        lambda self, ph: phases.append(ph) or original_targets(self, ph))
    monkeypatch.setattr(SplitDataset, "inputs",
                        lambda self, ph: phases.append(ph) or original_inputs(self, ph))
    train(TrainConfig(**TINY), small_split)
    assert phases and set(phases) == {"validation"}


def test_loss_decreases_on_fixed_batch():
    task = markov_task(num_items=20, num_users=200, length=20, rng=0)
    split = task.split()
    drops = []
    for seed in range(3):
        p = with_vocab(init_model(20, 16, 2, dropout=0.0, rng=seed), split.vocab_hash)
        batch = next(make_batches(split, 64, 50, np.random.default_rng(seed)))
        opt = OptimizerState(lr=1e-3)
        cfg = TrainConfig(dropout=0.0)
        first = None
        for _ in range(50):
            loss, grads = batch_loss(p, batch, cfg)
            first = loss if first is None else first
            adamw_step(p, grads, opt)
        drops.append(first - batch_loss(p, batch, cfg)[0])
    assert np.mean(drops) > 0 and min(drops) > 0


def test_validation_recall_improves_early(markov_run):
    scores = [r.metrics["recall@1"] for r in markov_run["report"].rounds]
    assert max(scores[1:5]) > scores[0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.0)
    with pytest.raises(ValueError):
        TrainConfig(select_metric="mrr")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        train(TrainConfig(), split_from_sequences([[1, 2]]))


# ---------------------------------------------------------- grid search


def test_single_cell_grid_equals_train(small_split):
    base = TrainConfig(**TINY)
    cfg, params, cells = grid_search(base, small_split, (0.0,), (0.1,))
    report, ref = train(base, small_split)
    assert len(cells) == 1 and cfg == base
    assert cells[0][1].deterministic_view() == report.deterministic_view()
    assert params.digest() == ref.digest()


def test_two_by_two_grid_selects_argmax(small_split):
    base = TrainConfig(**TINY)
    cfg, params, cells = grid_search(base, small_split, (0.0, 1e-2), (0.1, 0.4))
    assert len(cells) == 4
    assert {(c.weight_decay, c.dropout) for c, _ in cells} == {
        (0.0, 0.1), (0.0, 0.4), (1e-2, 0.1), (1e-2, 0.4)}
    scores = [r.best_score for _, r in cells]
    winner = scores.index(max(scores))
    assert cfg == cells[winner][0]
    assert cells[winner][1].best_score == max(scores)
