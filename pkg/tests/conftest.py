import numpy as np
import pytest

from ecroute.tensor import Tape, Tensor, backward, finite_diff_grad


def rel_err(got, want) -> float:
    """Max abs difference scaled by the largest reference magnitude."""
    got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
    return float(np.max(np.abs(got - want)) / max(np.max(np.abs(want)), 1e-12))


def grad_and_fd(f, arrays, h=1e-5, max_coords=None, rng=None):
    """Autodiff gradients of scalar ``f(*tensors)`` and central differences for each input.

    With ``max_coords`` only a random subset of coordinates per input is probed.
    Returns a list of (autodiff, finite-difference) pairs, flattened.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    grads = backward(out, tape, wrt=leaves)
    pairs = []
    for j, leaf in enumerate(leaves):
        def fj(x, j=j):
            args = [Tensor(a) for a in arrays]
            args[j] = x
            return f(*args)

        n = leaf.size
        coords = None
        if max_coords is not None and n > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(n, max_coords, replace=False))
        fd = finite_diff_grad(fj, arrays[j], h=h, indices=coords)
        ad = grads[leaf].reshape(-1)
        if coords is None:
            pairs.append((ad, np.asarray(fd.data).reshape(-1)))
        else:
            pairs.append((ad[coords], fd))
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def np_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def np_softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=axis, keepdims=True)


def ec_oracle(x, w_r, w1, w2, capacity):
    """Dense masked expert-choice computation: every expert runs on every token,
    outputs are weighted by a gating matrix built from per-column sorting."""
    a = np_softmax(x @ w_r)
    s, e = a.shape
    g = np.zeros_like(a)
    for i in range(e):
        for tok in sorted(range(s), key=lambda t: (-a[t, i], t))[:capacity]:
            g[tok, i] = a[tok, i]
    out = np.zeros_like(x)
    for i in range(e):
        out += g[:, i : i + 1] * (np_gelu(x @ w1[i]) @ w2[i])
    return out, a, g


def random_moe_instance(rng, s, e, d, h=None):
    from ecroute.router import ExpertParams

    h = h or 2 * d
    x = rng.normal(size=(s, d))
    params = ExpertParams(
        Tensor(rng.normal(size=(d, e)), requires_grad=True),
        Tensor(rng.normal(size=(e, d, h)) / np.sqrt(d), requires_grad=True),
        Tensor(rng.normal(size=(e, h, d)) / np.sqrt(h), requires_grad=True),
    )
    return x, params


def train_gaussian_transport(mean, std=0.1, steps=600, hidden=32, batch=256, seed=0, lr=3e-3):
    """Fit a two-layer velocity MLP on Normal(mean, std^2) data with the flow loss.

    Returns ``v(x, t)`` for :func:`ecroute.flow.euler_sampler`.
    """
    from ecroute import tensor as T
    from ecroute.flow import TimestepLaw, make_flow_batch, rf_loss
    from ecroute.harness import RMSPropState, TrainConfig, optimizer_step

    mean = np.asarray(mean, dtype=float)
    dim = mean.size
    rng = np.random.default_rng(seed)
    params = {
        "w1": Tensor(rng.normal(0, 1 / np.sqrt(dim + 1), (dim + 1, hidden)), requires_grad=True),
        "b1": Tensor(np.zeros(hidden), requires_grad=True),
        "w2": Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, dim)), requires_grad=True),
        "b2": Tensor(np.zeros(dim), requires_grad=True),
    }

    def net(p, x, t):
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (x.shape[0], 1))
        h = T.concat([T.as_tensor(x), Tensor(t)], axis=1) @ p["w1"] + p["b1"]
        return T.gelu(h) @ p["w2"] + p["b2"]

    cfg = TrainConfig(learning_rate=lr, warmup_steps=20, total_steps=steps)
    state = RMSPropState()
    for step in range(steps):
        x0 = mean + std * rng.standard_normal((batch, dim))
        fb = make_flow_batch(x0, rng, TimestepLaw())
        with Tape() as tape:
            loss = rf_loss(lambda x, t, ctx: net(params, x, t), fb)
        grads = backward(loss, tape, wrt=list(params.values()))
        params = optimizer_step(params, {k: grads[v] for k, v in params.items()}, step, cfg, state)
    return lambda x, t: net(params, x, t).data
