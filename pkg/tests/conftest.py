import numpy as np
import pytest

from lrurec.model import init_model, model_backward
from lrurec.numeric import finite_diff_grad


def rel_err(num, ana):
    """Norm-wise relative error, zero when both sides vanish."""
    num, ana = np.asarray(num), np.asarray(ana)
    den = max(np.linalg.norm(num), np.linalg.norm(ana))
    return 0.0 if den < 1e-12 else float(np.linalg.norm(num - ana) / den)


def real_view(a):
    return a.view(a.real.dtype) if np.iscomplexobj(a) else a


def generic_model(rng, item_count=12, hidden=4, blocks=2, weight_scale=0.3, **options):
    """A model moved away from its init so every gradient is O(1e-2) or larger.

    At init the weights are tiny and LayerNorms are identities, which makes
    finite-difference checks dominated by rounding rather than by the code
    under test.
    """
    params = init_model(item_count, hidden, blocks, rng=rng, **options)
    for name, arr in params.named_arrays().items():
        tail = name.rsplit(".", 1)[-1]
        if tail in ("E", "W1", "W2", "B", "C"):
            arr[...] = arr * (weight_scale / 0.02)
        elif tail in ("beta", "b1", "b2", "b_o"):
            arr[...] = rng.normal(0.0, 0.1, arr.shape)
        elif tail == "alpha":
            arr[...] = 1.0 + rng.normal(0.0, 0.1, arr.shape)
    params.E[0] = 0.0
    params.b_o[0] = 0.0
    return params


def model_gradient_errors(params, ids, targets, mask, dropout_seed=None, candidates=None):
    """Per-parameter-group ``(relative error, max abs error)`` of model_backward
    against central differences."""
    training = dropout_seed is not None

    def loss():
        rng = np.random.default_rng(dropout_seed) if training else None
        return model_backward(params, ids, targets, mask, training, rng, candidates)[0]

    rng = np.random.default_rng(dropout_seed) if training else None
    _, grads = model_backward(params, ids, targets, mask, training, rng, candidates)
    errors = {}
    for name, arr in params.named_arrays().items():
        num = finite_diff_grad(lambda _: loss(), real_view(arr), eps=1e-5)
        ana = real_view(grads[name])
        errors[name] = (rel_err(num, ana), float(np.max(np.abs(num - ana))))
    return errors


def worst(errors, atol=0.0):
    """Groups failing both the relative bound and the absolute floor, plus the max rel error."""
    return max(rel if absd > atol else 0.0 for rel, absd in errors.values())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def markov_run():
    """One end-to-end training run on a 20-item first-order Markov chain.

    Shared by every test that needs a trained model, since it takes a few
    minutes. ``final`` holds the parameters after the last optimizer step,
    ``best`` the early-stopping selection.
    """
    import time

    from lrurec.synthetic import markov_task
    from lrurec.train import TrainConfig, model_from_config, train

    task = markov_task(num_items=20, num_users=2000, length=20, rng=0)
    split = task.split(max_len=50)
    config = TrainConfig(hidden_dim=32, num_blocks=2, dropout=0.1, validate_every=100,
                         patience=10, select_metric="recall@1", seed=0)
    final = model_from_config(config, split, np.random.default_rng(1))
    t0 = time.perf_counter()
    report, best = train(config, split, params=final)
    return {"task": task, "split": split, "config": config, "report": report, "best": best,
            "final": final, "seconds": time.perf_counter() - t0}
