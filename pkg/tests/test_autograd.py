import numpy as np
import pytest

from blur import autograd as ag
from blur.errors import ContractError, NumericError
from blur.network import ModelConfig, forward_tape, init_model, named_parameters
from blur.scan import seq_scan
from blur.training import cross_entropy, loss_mae, loss_mse

from gradcheck import check_inputs, check_params

TOL = 1e-4
CONFIGS = 100


def _pos(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


ELEMENTWISE = {
    "add": (lambda x, y: ag.sum(ag.sin(x + y)), 2),
    "sub": (lambda x, y: ag.sum(ag.sin(x - y)), 2),
    "mul": (lambda x, y: ag.sum(x * y * x), 2),
    "div": (lambda x, y: ag.sum(x / y), 2),
    "power": (lambda x: ag.sum(ag.power(x, 3.0)), 1),
    "exp": (lambda x: ag.sum(ag.exp(x)), 1),
    "log": (lambda x: ag.sum(ag.log(x)), 1),
    "sin_cos": (lambda x: ag.sum(ag.sin(x) * ag.cos(x)), 1),
    "sigmoid": (lambda x: ag.sum(ag.sigmoid(x) * x), 1),
    "tanh": (lambda x: ag.sum(ag.tanh(x) * x), 1),
    "abs": (lambda x: ag.sum(ag.absolute(x) * x), 1),
    "mean_axis": (lambda x: ag.sum(ag.power(ag.mean(x, axis=0), 2.0)), 1),
    "sum_keepdims": (lambda x: ag.sum(ag.sin(ag.sum(x, axis=1, keepdims=True)) * x), 1),
    "reshape_T": (lambda x: ag.sum(ag.sin(ag.reshape(x, (-1,))) * ag.reshape(ag.transpose(x), (-1,))), 1),
    "getitem": (lambda x: ag.sum(ag.power(x[1:, ::2], 2.0)), 1),
    "stack": (lambda x, y: ag.sum(ag.sin(ag.stack([x, y], axis=1))), 2),
    "log_softmax": (lambda x: ag.sum(ag.log_softmax(x) * ag.log_softmax(x)), 1),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_primitives(name):
    fn, arity = ELEMENTWISE[name]
    worst = 0.0
    for seed in range(CONFIGS):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        worst = max(worst, check_inputs(fn, [_pos(rng, *shape) for _ in range(arity)])[0])
    assert worst <= TOL


def test_matmul_batched():
    worst = 0.0
    for seed in range(CONFIGS):
        rng = np.random.default_rng(seed)
        x, w = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        worst = max(worst, check_inputs(lambda a, b: ag.sum(ag.sin(ag.matmul(a, b))), [x, w])[0])
    assert worst <= TOL


@pytest.mark.parametrize("reverse", [False, True])
def test_scan_primitive(reverse):
    worst = 0.0
    for seed in range(CONFIGS):
        rng = np.random.default_rng(seed)
        n, N = int(rng.integers(1, 4)), int(rng.integers(1, 12))
        r, t = rng.uniform(0.3, 0.99, n), rng.uniform(0, 2 * np.pi, n)
        arrays = [r * np.cos(t), r * np.sin(t), rng.normal(size=(2, N, n)), rng.normal(size=(2, N, n))]
        w = rng.normal(size=(2, 2, N, n))

        def fn(lr, li, br, bi):
            return ag.sum(ag.linear_scan(lr, li, br, bi, reverse=reverse, block_size=4) * w)

        worst = max(worst, check_inputs(fn, arrays)[0])
    assert worst <= TOL


@pytest.mark.parametrize("loss", ["mse", "mae", "cross_entropy"])
def test_loss_primitives(loss):
    worst = 0.0
    for seed in range(CONFIGS):
        rng = np.random.default_rng(seed)
        if loss == "cross_entropy":
            labels = rng.integers(0, 3, size=(2, 4))
            fn = lambda x: cross_entropy(labels, x)
            arrays = [rng.normal(size=(2, 4, 3))]
        else:
            y = rng.normal(size=(3, 4))
            f = loss_mse if loss == "mse" else loss_mae
            fn = lambda x: f(ag.Tensor(y), x)
            arrays = [y + rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1, size=(3, 4))]
        worst = max(worst, check_inputs(fn, arrays)[0])
    assert worst <= TOL


def _model_check(cfg, seed, train=True, entries=3):
    model = init_model(cfg)
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(3, 6, cfg.d_input))
    if cfg.task == "regression":
        y = rng.normal(size=(3, 6, cfg.d_output))
    else:
        y = rng.integers(0, cfg.d_output, size=(3,) if cfg.task == "classification" else (3, 6))

    def loss_fn(track):
        out, _ = forward_tape(model, v, train, rng=np.random.default_rng(seed), track=track)
        return loss_mse(ag.Tensor(y), out) if cfg.task == "regression" else cross_entropy(y, out)

    return check_params(loss_fn, named_parameters(model), max_entries=entries, seed=seed)[0]


@pytest.mark.parametrize("variant", [
    dict(nonlinearity="glu", norm="batch"),
    dict(nonlinearity="mlp", norm="layer"),
    dict(nonlinearity="glu", norm="none", bidirectional=False),
    dict(nonlinearity="mlp", norm="batch", task="classification", d_output=3),
    dict(nonlinearity="glu", norm="layer", task="labeling", d_output=3),
])
def test_block_primitives(variant):
    """Merge, GLU/MLP, skip and norms through one-block models of random widths."""
    worst = 0.0
    for seed in range(CONFIGS):
        rng = np.random.default_rng(seed)
        opts = dict(d_input=2, d_model=int(rng.integers(2, 4)), d_hidden=int(rng.integers(2, 5)), d_output=2,
                    n_layers=1, e_min=0.5, e_max=0.99, dropout=0.2, learn_gamma=True, seed=seed)
        opts.update(variant)
        worst = max(worst, _model_check(ModelConfig(**opts), seed, train=bool(seed % 2)))
    assert worst <= TOL


def test_scan_lambda_closed_form():
    # h3 = lam^2 b1 + lam b2 + b3, so dh3/dlam = 2 lam b1 + b2 and h2 = lam b1 + b2
    lam, b = 0.7, np.array([1.3, -0.4, 2.0])
    lr, li = ag.Tensor([lam], "lr", True), ag.Tensor([0.0], "li", True)
    br, bi = ag.Tensor(b[:, None], "br", True), ag.Tensor(np.zeros((3, 1)))
    with ag.Tape() as tape:
        h = ag.linear_scan(lr, li, br, bi)
        loss = ag.sum(h[0][:, 0])
    g = ag.backward(tape, loss)
    expected = (b[0]) + (2 * lam * b[0] + b[1])
    assert abs(g["lr"][0] - expected) <= 1e-12
    assert np.allclose(g["br"][:, 0], [1 + lam + lam**2, 1 + lam, 1], atol=1e-12)


def test_scan_adjoint_matches_sequential():
    rng = np.random.default_rng(0)
    n, N = 8, 3000
    lam = rng.uniform(0.9, 0.999, n) * np.exp(1j * rng.uniform(0, 2 * np.pi, n))
    b = rng.normal(size=(N, n)) + 1j * rng.normal(size=(N, n))
    w = rng.normal(size=(2, N, n))
    tensors = [ag.Tensor(x, f"p{i}", True) for i, x in enumerate((lam.real, lam.imag, b.real, b.imag))]
    with ag.Tape() as tape:
        loss = ag.sum(ag.linear_scan(*tensors) * w)
    g = ag.backward(tape, loss)
    # reference adjoint: sequential scan of conj(lam) over the reversed upstream gradient
    up = w[0] + 1j * w[1]
    delta = seq_scan(np.conj(lam), up[::-1]).values[::-1]
    h = seq_scan(lam, b).values
    prev = np.vstack([np.zeros((1, n)), h[:-1]])
    g_lam = np.sum(delta * np.conj(prev), axis=0)
    got_delta = g["p2"] + 1j * g["p3"]
    got_lam = g["p0"] + 1j * g["p1"]
    assert np.max(np.abs(got_delta - delta)) <= 1e-10 * np.max(np.abs(delta))
    assert np.max(np.abs(got_lam - g_lam)) <= 1e-10 * np.max(np.abs(g_lam))


class TestTape:
    def test_mse_gradient_zero_at_match(self):
        y = np.arange(6.0).reshape(2, 3)
        yhat = ag.Tensor(y.copy(), "yhat", True)
        with ag.Tape() as tape:
            loss = loss_mse(ag.Tensor(y), yhat)
        assert np.array_equal(ag.backward(tape, loss)["yhat"], np.zeros_like(y))

    def test_reverse_topological_order(self):
        x = ag.Tensor([1.0, 2.0], "x", True)
        with ag.Tape() as tape:
            a = ag.exp(x)
            b = a * x
            loss = ag.sum(b + a)
        produced = {id(node.out): i for i, node in enumerate(tape.nodes)}
        for i, node in enumerate(tape.nodes):
            for inp in node.inputs:
                assert produced.get(id(inp), -1) < i

    def test_accumulation_and_clear(self):
        x = ag.Tensor([3.0], "x", True)
        tape = ag.Tape()
        for _ in range(2):
            with tape:
                loss = ag.sum(x * x)
            ag.backward(tape, loss)
        assert tape.gradients["x"][0] == 12.0
        tape.clear()
        assert tape.gradients.get("x", np.zeros(1))[0] == 0.0 and not tape.nodes

    def test_contract_errors(self):
        x = ag.Tensor([1.0, 2.0], "x", True)
        with ag.Tape() as tape:
            vec = x * 2.0
        with pytest.raises(ContractError):
            ag.backward(tape, vec)
        with pytest.raises(ContractError):
            ag.backward(ag.Tape(), ag.sum(x))

    def test_nonfinite_gradient(self):
        x = ag.Tensor([0.0], "x", True)
        with np.errstate(divide="ignore"):
            with ag.Tape() as tape:
                loss = ag.sum(ag.log(x))
            with pytest.raises(NumericError):
                ag.backward(tape, loss)

    def test_untracked_ops_do_not_record(self):
        with ag.Tape() as tape:
            ag.exp(ag.Tensor([1.0]))
        assert not tape.nodes
