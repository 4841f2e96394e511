import numpy as np
import pytest

from hopmixer import lagrangians as lg
from hopmixer.blocks import Mode, MixerBlock, Norm, iterate_block, parallel_block, symmetric_layernorm
from hopmixer.errors import ConfigurationError, DivergenceError
from hopmixer.numerics import finite_diff_grad, make_rng
from hopmixer.train import (
    MODES,
    MSE,
    Adam,
    CrossEntropyFrobenius,
    MixerNet,
    TrainConfig,
    backward,
    evaluate,
    frobenius_penalty,
    glyph_denoising_data,
    load_dataset,
    load_net,
    make_glyphs,
    save_dataset,
    save_net,
    token_classification_data,
    total_loss,
    train,
    wtilde_norm,
    write_curve,
)

from conftest import rel_err


def _toy(mode, rng, norm="joint", n_iter=1, **kw):
    net = MixerNet.init(rng, 4, 8, d_in=3, n_classes=3, n_layers=2, mode=mode, scale=0.5,
                        norm=norm, n_iter=n_iter, d_token=3, d_channel=5, **kw)
    for b in net.blocks:
        if b.mode is Mode.ASYMMETRIC:
            b.W2_tilde[:] = 0.2 * rng.standard_normal(b.W2_tilde.shape)
            b.W4_tilde[:] = 0.2 * rng.standard_normal(b.W4_tilde.shape)
        if b.bias is not None:
            for v in b.bias.values():
                v[:] = 0.1 * rng.standard_normal(v.shape)
    return net


def _fd_check(net, X, Y, loss):
    _, grads = backward(net, X, Y, loss)
    worst = 0.0
    for name, p in net.params().items():
        def f(q, p=p):
            saved = p.copy()
            p[...] = q
            try:
                return total_loss(net, X, Y, loss)
            finally:
                p[...] = saved
        worst = max(worst, rel_err(grads[name], finite_diff_grad(f, p.copy()), floor=1e-6))
    return worst


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("norm", ["joint", "channel"])
def test_gradients_match_finite_differences(mode, norm):
    rng = make_rng(3)
    net = _toy(mode, rng, norm=norm)
    X = rng.standard_normal((5, 4, 3))
    Y = rng.integers(0, 3, 5)
    lam = 0.3 if mode == "asym" else 0.0
    assert _fd_check(net, X, Y, CrossEntropyFrobenius(lam)) < 1e-4


def test_gradients_iterated_mse():
    rng = make_rng(4)
    blk = MixerBlock.init(rng, 3, 2, mode="symmetric", n_iter=3, scale=0.5, step=0.5, decay=0.3)
    net = MixerNet(blocks=[blk])
    X = rng.standard_normal((4, 3, 2))
    assert _fd_check(net, X, rng.standard_normal((4, 3, 2)), MSE()) < 1e-4


def test_symmetric_gradient_is_free_plus_transpose():
    rng = make_rng(5)
    sym = _toy("sym", rng)
    free = sym.copy()
    free.blocks = [
        MixerBlock(W1=b.W1.copy(), W3=b.W3.copy(), W2_free=b.W2.copy(), W4_free=b.W4.copy(), mode="free")
        for b in sym.blocks
    ]
    X = rng.standard_normal((5, 4, 3))
    Y = rng.integers(0, 3, 5)
    _, gs = backward(sym, X, Y, CrossEntropyFrobenius())
    _, gf = backward(free, X, Y, CrossEntropyFrobenius())
    for i in range(2):
        want = gf[f"blocks.{i}.W1"] + gf[f"blocks.{i}.W2"].T
        assert np.max(np.abs(gs[f"blocks.{i}.W1"] - want)) < 1e-10
        want = gf[f"blocks.{i}.W3"] + gf[f"blocks.{i}.W4"].T
        assert np.max(np.abs(gs[f"blocks.{i}.W3"] - want)) < 1e-10


def test_zero_net_zero_gradients():
    blk = MixerBlock(W1=np.zeros((2, 3)), W3=np.zeros((4, 5)), mode="free",
                     W2_free=np.zeros((3, 2)), W4_free=np.zeros((5, 4)))
    net = MixerNet(blocks=[blk])
    value, grads = backward(net, np.zeros((2, 3, 4)), np.zeros((2, 3, 4)), MSE())
    assert value == 0.0
    assert all(not g.any() for g in grads.values())


# -- penalty ------------------------------------------------------------------

def test_penalty_cases(rng):
    net = MixerNet.init(rng, 1, 1, n_layers=1, mode="asym", d_token=2, d_channel=1)
    assert frobenius_penalty(net) == 0.0
    net.blocks[0].W2_tilde[:] = [[3.0, 4.0]]
    assert frobenius_penalty(net) == 25.0


def test_penalty_loop_oracle(rng):
    net = _toy("asym", rng)
    want = 0.0
    for b in net.blocks:
        for m in (b.W2_tilde, b.W4_tilde):
            for v in m.ravel():
                want += v * v
    assert abs(frobenius_penalty(net) - want) < 1e-12
    assert wtilde_norm(net) == frobenius_penalty(net)


def test_penalty_needs_asym(rng):
    net = _toy("sym", rng)
    with pytest.raises(ConfigurationError):
        frobenius_penalty(net)
    assert wtilde_norm(net) == 0.0


# -- optimizer and loop -------------------------------------------------------

def test_adam_first_steps_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    g1 = np.array([0.5, -1.0])
    opt.step(p, {"w": g1})
    # the first bias-corrected step has magnitude lr in every coordinate
    assert np.allclose(p["w"], [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)
    after_first = p["w"].copy()
    g2 = np.array([1.0, 1.0])
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    mh, vh = m / (1 - 0.9**2), v / (1 - 0.999**2)
    want = after_first - 0.1 * mh / (np.sqrt(vh) + 1e-8)
    opt.step(p, {"w": g2})
    assert np.max(np.abs(p["w"] - want)) < 1e-12


@pytest.mark.parametrize("bad", [{"lr": -1.0}, {"beta1": 1.0}, {"loss": "hinge"}, {"epochs": -1}])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def _small_task(seed=0, noise=0.8, n_train=200, n_test=100):
    return token_classification_data(make_rng(1000 + seed), n_train=n_train, n_test=n_test, noise=noise)


def test_zero_lr_keeps_parameters(rng):
    d = _small_task()
    net = MixerNet.init(rng, 4, 8, d_in=8, n_classes=2, mode="asym", scale=0.5)
    trained, curve = train(net, d["X_train"], d["Y_train"], TrainConfig(lr=0.0, epochs=2, loss="ce", lam=0.1))
    for k, v in net.params().items():
        assert np.array_equal(v, trained.params()[k])
    assert len({r.loss for r in curve}) == 1 and [r.epoch for r in curve] == [0, 1, 2]


def test_train_is_deterministic(tmp_path):
    d = _small_task()
    runs = []
    for i in range(2):
        net = MixerNet.init(make_rng(0), 4, 8, d_in=8, n_classes=2, mode="para", scale=0.5)
        _, curve = train(net, d["X_train"], d["Y_train"],
                         TrainConfig(lr=3e-3, epochs=2, loss="ce", noise_sigma=0.1, seed=9))
        write_curve(curve, tmp_path / f"c{i}.csv")
        runs.append((tmp_path / f"c{i}.csv").read_bytes())
    assert runs[0] == runs[1]
    assert runs[0].startswith(b"epoch,loss,metric\n")


def test_symmetric_tie_survives_training():
    d = _small_task()
    net = MixerNet.init(make_rng(1), 4, 8, d_in=8, n_classes=2, mode="sym", scale=0.5)
    trained, _ = train(net, d["X_train"], d["Y_train"], TrainConfig(lr=1e-2, epochs=2, loss="ce"))
    for b in trained.blocks:
        assert np.array_equal(b.W2, b.W1.T) and np.array_equal(b.W4, b.W3.T)
        assert set(b.params()) == {"W1", "W3"}


def test_classification_learns():
    d = _small_task(n_train=600, n_test=300)
    net = MixerNet.init(make_rng(0), 4, 8, d_in=8, n_classes=2, mode="para", scale=0.5)
    trained, curve = train(net, d["X_train"], d["Y_train"], TrainConfig(lr=3e-3, epochs=8, batch_size=32, loss="ce"))
    assert curve[-1].loss < 0.5 * curve[0].loss
    assert evaluate(trained, d["X_test"], d["Y_test"]) > 0.9


def test_penalty_shrinks_wtilde_over_seeds():
    d = _small_task()
    for seed in range(10):
        norms = []
        for lam in (0.0, 1.0):
            net = MixerNet.init(make_rng(seed), 4, 8, d_in=8, n_classes=2, mode="asym", scale=0.5)
            trained, _ = train(net, d["X_train"], d["Y_train"],
                               TrainConfig(lr=3e-3, epochs=2, loss="ce", lam=lam, seed=seed))
            norms.append(frobenius_penalty(trained))
        assert norms[1] < norms[0]


def test_penalty_nonincreasing_in_lambda():
    d = _small_task()
    values = []
    for lam in (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0):
        net = MixerNet.init(make_rng(0), 4, 8, d_in=8, n_classes=2, mode="asym", scale=0.5)
        trained, _ = train(net, d["X_train"], d["Y_train"], TrainConfig(lr=3e-3, epochs=3, loss="ce", lam=lam))
        values.append(frobenius_penalty(trained))
    assert all(b <= a + 1e-9 for a, b in zip(values, values[1:]))


def test_divergence_reports_epoch(rng):
    d = _small_task()
    X = d["X_train"].copy()
    X[0, 0, 0] = np.inf
    net = MixerNet.init(rng, 4, 8, d_in=8, n_classes=2, mode="para")
    with pytest.raises(DivergenceError) as info, np.errstate(invalid="ignore"):
        train(net, X, d["Y_train"], TrainConfig(lr=1e-3, epochs=1, loss="ce"))
    assert info.value.step == 0


def test_denoising_loss_drops():
    rng = make_rng(0)
    d = glyph_denoising_data(rng, n_train=200, n_test=50)
    d = {k: v.reshape(v.shape[0], 64, 1) for k, v in d.items()}
    blk = MixerBlock.init(rng, 64, 1, mode="symmetric", d_token=32, d_channel=32, scale=0.3,
                          activation_s=lg.ReLUSquared(), activation_c=lg.ReLUSquared(), step=0.5, decay=1.0, n_iter=6)
    trained, curve = train(MixerNet(blocks=[blk]), d["X_train"], d["Y_train"],
                           TrainConfig(lr=1e-2, batch_size=32, epochs=10, loss="mse", noise_sigma=0.3, seed=1))
    assert curve[-1].loss < 0.5 * curve[0].loss
    assert evaluate(trained, d["X_test"], d["Y_test"]) < np.mean((d["X_test"] - d["Y_test"]) ** 2)


def test_trained_symmetric_block_settles():
    d = token_classification_data(make_rng(1000), n_train=1000, n_test=200, noise=0.8)
    net = MixerNet.init(make_rng(0), 4, 8, d_in=8, n_classes=2, mode="sym", scale=0.5)
    trained, _ = train(net, d["X_train"], d["Y_train"], TrainConfig(lr=3e-3, epochs=20, batch_size=32, loss="ce"))
    x = parallel_block(d["X_test"] @ trained.embed, trained.blocks[0])
    states = [x] + iterate_block(x, trained.blocks[1], 16)
    # without decay the raw state keeps drifting; its normalized direction is what settles
    deltas = np.array([
        np.linalg.norm((symmetric_layernorm(b) - symmetric_layernorm(a)).reshape(len(x), -1), axis=1)
        for a, b in zip(states, states[1:])
    ])
    settling = np.all(np.diff(deltas, axis=0) <= 1e-12, axis=0)
    assert settling.mean() >= 0.8


# -- evaluate -----------------------------------------------------------------

def _oracle_classifier():
    blk = MixerBlock(W1=np.zeros((1, 1)), W3=np.zeros((2, 1)), mode="free",
                     W2_free=np.zeros((1, 1)), W4_free=np.zeros((1, 2)))
    return MixerNet(blocks=[blk], head=np.array([[1.0, -1.0], [-1.0, 1.0]]), head_b=np.zeros(2))


def test_evaluate_separable_oracle():
    # zero mixing weights leave inputs unchanged, so the head sees them directly
    X = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert evaluate(_oracle_classifier(), X, np.array([0, 1])) == 1.0


def test_evaluate_confusion_count():
    net = _oracle_classifier()
    X = np.array([[[a, b]] for a, b in [(1, 0), (0, 1), (2, 1), (1, 3), (5, 0), (0, 2), (1, 1.5), (3, 2), (0, 4), (2, 0)]],
                 dtype=float)
    Y = np.array([0, 1, 1, 1, 0, 0, 1, 0, 0, 0])
    # predictions: 0 1 0 1 0 1 1 0 1 0 -> correct at indices 0,1,3,4,6,7,9
    assert evaluate(net, X, Y) == pytest.approx(0.7)


def test_evaluate_chance_level():
    accs = []
    for seed in range(10):
        d = token_classification_data(make_rng(50 + seed), n_train=10, n_test=400, n_classes=3)
        net = MixerNet.init(make_rng(seed), 4, 8, d_in=8, n_classes=3, mode="para", scale=0.5)
        accs.append(evaluate(net, d["X_test"], d["Y_test"]))
    assert abs(np.mean(accs) - 1 / 3) < 0.15


def test_evaluate_mse_for_grid_nets(rng):
    blk = MixerBlock(W1=np.zeros((2, 3)), W3=np.zeros((4, 5)))
    X = rng.standard_normal((6, 3, 4))
    assert evaluate(MixerNet(blocks=[blk]), X, np.zeros_like(X)) == pytest.approx(np.mean(X**2))


# -- data and checkpoints -----------------------------------------------------

def test_token_task_needs_mixing():
    d = token_classification_data(make_rng(0), n_train=50, n_test=10, n_tokens=5, n_classes=3, noise=0.0)
    X, y = d["X_train"], d["Y_train"].astype(int)
    proto = {c: X[y == c][0] for c in range(3)}
    for c in range(3):
        # same multiset of token features in every class, different arrangement
        assert np.allclose(np.sort(proto[c], axis=0), np.sort(proto[0], axis=0))
        if c:
            assert not np.allclose(proto[c], proto[0])
    assert set(np.bincount(y)) <= {16, 17}


def test_glyphs_are_binary_and_nontrivial():
    g = make_glyphs(make_rng(0), 10, 8)
    assert g.shape == (10, 8, 8) and set(np.unique(g)) == {0.0, 1.0}
    d = glyph_denoising_data(make_rng(0), 20, 10, sigma=0.3)
    assert np.array_equal(d["X_train"], d["Y_train"])
    assert 0.2 < np.std(d["X_test"] - d["Y_test"]) < 0.4


def test_dataset_roundtrip(tmp_path):
    d = _small_task()
    save_dataset(tmp_path, d, {"task": "classification"})
    back, meta = load_dataset(tmp_path)
    assert meta == {"task": "classification"}
    assert all(np.array_equal(back[k], d[k]) for k in d)


@pytest.mark.parametrize("mode", MODES)
def test_net_checkpoint_roundtrip(tmp_path, rng, mode):
    net = _toy(mode, rng)
    save_net(net, tmp_path)
    back = load_net(tmp_path)
    X = rng.standard_normal((3, 4, 3))
    assert np.array_equal(back.forward(X), net.forward(X))
    assert back.params().keys() == net.params().keys()
