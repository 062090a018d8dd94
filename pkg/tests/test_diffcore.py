"""Tests for the autodiff core: encoding, MLPs, backward, optimizer."""

import math

import numpy as np
import pytest

from kpfield import autodiff as ad
from kpfield.encoding import PositionalEncoder
from kpfield.mlp import MLPSpec, mlp_forward
from kpfield.optim import Adam, LrSchedule, NonFiniteGradient
from kpfield.params import ParamStore

from fdcheck import fd_check_store, fd_grad, max_rel_err


# ------------------------------------------------------------------ encoding

def encode_oracle(x, nbands, include_identity=True):
    """Scalar-loop reference for the frequency encoding layout."""
    out = []
    if include_identity:
        out.extend(float(v) for v in x)
    for j in range(nbands):
        f = math.pi * 2.0**j
        out.extend(math.sin(f * float(v)) for v in x)
        out.extend(math.cos(f * float(v)) for v in x)
    return np.array(out)


def test_encode_zero_point():
    enc = PositionalEncoder(nbands=2)
    got = enc.encode_array(np.array([0.0, 0.0]))[0]
    assert np.allclose(got, [0, 0, 0, 0, 1, 1, 0, 0, 1, 1], atol=0)


def test_encode_half():
    enc = PositionalEncoder(nbands=1)
    got = enc.encode_array(np.array([0.5, 0.0]))[0]
    assert np.allclose(got, [0.5, 0, 1, 0, 0, 1], atol=1e-15)


def test_encode_matches_scalar_oracle():
    enc = PositionalEncoder(nbands=4)
    x = np.array([0.3, -0.7])
    got = enc.encode_array(x)[0]
    want = encode_oracle(x, 4)
    assert got.shape == (18,)
    assert np.allclose(got, want, atol=1e-14)
    assert enc.out_dim(2) == 18


def test_encode_deterministic_bitwise():
    enc = PositionalEncoder(nbands=6)
    x = np.random.default_rng(7).uniform(-1, 1, (32, 2))
    a = enc.encode_array(x)
    b = enc.encode_array(x)
    assert np.array_equal(a, b)


def test_encode_window_annealing():
    enc = PositionalEncoder(nbands=4, window=1.5)
    w = enc.band_weights()
    assert w[0] == 1.0
    assert 0.0 < w[1] < 1.0
    assert w[2] == 0.0 and w[3] == 0.0
    # window covering all bands reproduces the unwindowed encoding
    full = PositionalEncoder(nbands=4, window=4.0)
    x = np.array([[0.3, -0.2]])
    assert np.allclose(full.encode_array(x), PositionalEncoder(4).encode_array(x))


# ---------------------------------------------------------------------- MLPs

def build_store(spec, seed=0):
    store = ParamStore()
    spec.build(store, np.random.default_rng(seed))
    return store


def test_mlp_zero_initialized_layer():
    spec = MLPSpec("net", (3, 2), zero_init_last=True)
    store = build_store(spec)
    y = mlp_forward(ad.const(np.ones((4, 3))), spec, store)
    assert np.array_equal(y.data, np.zeros((4, 2)))


def test_mlp_identity_relu():
    spec = MLPSpec("net", (2, 2, 2))
    store = build_store(spec)
    store.set("net.w0", np.eye(2))
    store.set("net.b0", np.zeros(2))
    store.set("net.w1", np.eye(2))
    store.set("net.b1", np.zeros(2))
    y = mlp_forward(ad.const(np.array([[1.0, -1.0]])), spec, store)
    assert np.array_equal(y.data, [[1.0, 0.0]])


def test_mlp_matches_matrix_oracle():
    spec = MLPSpec("net", (4, 8, 3))
    store = build_store(spec, seed=3)
    x = np.random.default_rng(5).standard_normal((6, 4))
    y = mlp_forward(ad.const(x), spec, store).data
    # independent matrix-arithmetic evaluation
    h = x @ store.get("net.w0") + store.get("net.b0")
    h = np.maximum(h, 0)
    want = h @ store.get("net.w1") + store.get("net.b1")
    assert np.allclose(y, want, atol=1e-13)


def test_mlp_skip_changes_input_dim():
    spec = MLPSpec("net", (4, 8, 8, 3), skips=(1,))
    store = build_store(spec)
    assert store.get("net.w1").shape == (12, 8)
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert mlp_forward(ad.const(x), spec, store).data.shape == (5, 3)


def test_mlp_shape_mismatch_names_layer():
    spec = MLPSpec("net", (4, 8, 3))
    store = build_store(spec)
    with pytest.raises(ad.ShapeError, match="net layer 0"):
        mlp_forward(ad.const(np.ones((2, 5))), spec, store)


# ------------------------------------------------------------------ backward

def test_backward_linear_grad_is_input():
    store = ParamStore()
    store.add("w", np.zeros(3))
    x = np.array([1.5, -2.0, 0.5])
    tape = ad.Tape()
    with tape:
        w = tape.param(store, "w")
        loss = ad.vsum(ad.mul(w, ad.const(x)))
    tape.backward(loss)
    assert np.allclose(store["w"].grad, x)


def test_backward_unreachable_block_zero():
    store = ParamStore()
    store.add("used", np.array([2.0]))
    store.add("unused", np.array([5.0]))
    tape = ad.Tape()
    with tape:
        w = tape.param(store, "used")
        loss = ad.sqnorm(w)
    tape.backward(loss)
    assert np.allclose(store["used"].grad, [4.0])
    assert np.array_equal(store["unused"].grad, [0.0])


def test_backward_requires_scalar_and_recording():
    store = ParamStore()
    store.add("w", np.ones(2))
    tape = ad.Tape()
    with tape:
        w = tape.param(store, "w")
        y = ad.mul(w, w)
    with pytest.raises(ad.GraphError):
        tape.backward(y)  # non-scalar
    with pytest.raises(ad.GraphError):
        tape.backward(ad.const(np.asarray(1.0)))  # never recorded


def test_backward_leaves_params_unchanged():
    spec = MLPSpec("net", (3, 8, 1))
    store = build_store(spec, seed=1)
    before = {n: store.get(n).copy() for n in store.names()}
    x = np.random.default_rng(2).standard_normal((4, 3))
    tape = ad.Tape()
    with tape:
        y = mlp_forward(tape.input(x), spec, store)
        loss = ad.mean(ad.mul(y, y))
    tape.backward(loss)
    for n, v in before.items():
        assert np.array_equal(store.get(n), v)


def _smooth_seed_mlp(seed, sizes, skips=()):
    """Build a random MLP + input whose relu preactivations avoid 0."""
    spec = MLPSpec("net", sizes, skips=skips)
    store = build_store(spec, seed=seed)
    x = np.random.default_rng(seed + 100).standard_normal((4, sizes[0])) * 0.7
    return spec, store, x


def test_backward_mlp_matches_finite_differences():
    spec, store, x = _smooth_seed_mlp(11, (6, 32, 32, 2))
    target = np.random.default_rng(0).standard_normal((4, 2))

    def loss_fn():
        y = mlp_forward(ad.const(x), spec, store)
        d = y.data - target
        return float((d * d).mean())

    tape = ad.Tape()
    with tape:
        y = mlp_forward(ad.const(x), spec, store)
        loss = ad.mean(ad.mul(ad.sub(y, ad.const(target)), ad.sub(y, ad.const(target))))
    tape.backward(loss)
    assert abs(loss.data - loss_fn()) < 1e-12
    assert fd_check_store(loss_fn, store, h=1e-4) < 1e-5


def test_backward_grad_wrt_input_matches_fd():
    spec, store, x = _smooth_seed_mlp(21, (3, 16, 1))
    tape = ad.Tape()
    with tape:
        xin = tape.input(x)
        y = mlp_forward(xin, spec, store)
        loss = ad.sqnorm(y)
    tape.backward(loss)
    g = tape.grad(xin)

    def loss_fn():
        return float((mlp_forward(ad.const(x), spec, store).data ** 2).sum())

    fd = fd_grad(loss_fn, x)
    assert max_rel_err(g, fd) < 1e-5


# ------------------------------------------------------------------- softmax

def test_softmax_identities():
    r = np.random.default_rng(3)
    z = r.standard_normal((64, 5)) * 4
    y = ad.softmax(ad.const(z)).data
    assert np.all(y > 0)
    assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-9
    y2 = ad.softmax(ad.const(z + 7.3)).data
    assert np.max(np.abs(y - y2)) < 1e-9


def test_softmax_gradient_fd():
    z = np.random.default_rng(9).standard_normal((3, 4))
    coef = np.random.default_rng(10).standard_normal((3, 4))
    store = ParamStore()
    store.add("z", z)

    def loss_fn():
        zz = store.get("z")
        e = np.exp(zz - zz.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
        return float((y * coef).sum())

    tape = ad.Tape()
    with tape:
        y = ad.softmax(tape.param(store, "z"))
        loss = ad.vsum(ad.mul(y, ad.const(coef)))
    tape.backward(loss)
    assert fd_check_store(loss_fn, store) < 1e-6


# ----------------------------------------------------------------- optimizer

def test_opt_first_step_magnitude():
    store = ParamStore()
    store.add("w", np.array([1.0]))
    opt = Adam(store, LrSchedule(base=0.01, decay_factor=1.0))
    store["w"].grad[:] = 0.5
    opt.step()
    # bias-corrected ratio is sign(g) on the first step (up to eps)
    assert abs(store.get("w")[0] - (1.0 - 0.01)) < 1e-6


def test_opt_zero_grad_no_change_moments_decay():
    store = ParamStore()
    store.add("w", np.array([2.0]))
    opt = Adam(store, LrSchedule(base=0.1, decay_factor=1.0))
    store["w"].grad[:] = 0.0
    opt.step()
    assert store.get("w")[0] == 2.0  # no momentum yet, update exactly zero
    # once primed, zero grads decay the moments toward zero
    store["w"].grad[:] = 1.0
    opt.step()
    m1 = abs(opt.m["w"][0])
    store["w"].grad[:] = 0.0
    opt.step()
    assert abs(opt.m["w"][0]) < m1


def adam_scalar_oracle(w0, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-python simulation of the update on f(w) = w^2."""
    w, m, v = w0, 0.0, 0.0
    out = [w]
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        w -= lr * mh / (math.sqrt(vh) + eps)
        out.append(w)
    return out


def test_opt_quadratic_descent_matches_oracle():
    oracle = adam_scalar_oracle(1.0, 10, 0.1)
    store = ParamStore()
    store.add("w", np.array([1.0]))
    opt = Adam(store, LrSchedule(base=0.1, decay_factor=1.0))
    traj = [1.0]
    for _ in range(10):
        store["w"].grad[:] = 2.0 * store.get("w")
        opt.step()
        traj.append(float(store.get("w")[0]))
    assert np.allclose(traj, oracle, atol=1e-12)
    mags = [abs(v) for v in traj]
    assert all(b < a for a, b in zip(mags, mags[1:]))


def test_opt_nonfinite_grad_names_block():
    store = ParamStore()
    store.add("bad.block", np.ones(2))
    opt = Adam(store)
    store["bad.block"].grad[:] = np.nan
    with pytest.raises(NonFiniteGradient, match="bad.block"):
        opt.step()


def test_opt_only_trainable_blocks_move():
    store = ParamStore()
    store.add("frozen", np.array([3.0]), trainable=False)
    store.add("live", np.array([3.0]))
    opt = Adam(store, LrSchedule(base=0.1, decay_factor=1.0))
    store["frozen"].grad[:] = 1.0
    store["live"].grad[:] = 1.0
    opt.step()
    assert store.get("frozen")[0] == 3.0
    assert store.get("live")[0] != 3.0


def test_opt_lr_schedule_decays():
    s = LrSchedule(base=1e-3, decay_factor=0.1, decay_interval=100)
    assert abs(s.rate(0) - 1e-3) < 1e-12
    assert abs(s.rate(100) - 1e-4) < 1e-12
    assert abs(s.rate(50) - 1e-3 * 0.1**0.5) < 1e-12


def test_opt_lr_scale_per_block():
    store = ParamStore()
    store.add("a", np.array([0.0]), lr_scale=10.0)
    store.add("b", np.array([0.0]))
    opt = Adam(store, LrSchedule(base=0.01, decay_factor=1.0))
    store["a"].grad[:] = 1.0
    store["b"].grad[:] = 1.0
    opt.step()
    ra = abs(store.get("a")[0])
    rb = abs(store.get("b")[0])
    assert abs(ra / rb - 10.0) < 1e-6
