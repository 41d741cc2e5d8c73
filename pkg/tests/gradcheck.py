"""Central finite differences against tape gradients."""
import numpy as np

from blur import autograd as ag

EPS = 1e-5
FLOOR = 1e-6


def rel_err(fd, an):
    return abs(fd - an) / max(abs(fd), abs(an), FLOOR)


def check_params(loss_fn, params: dict, max_entries=None, eps=EPS, seed=0):
    """Worst relative error over (a sample of) every entry of ``params``.

    ``loss_fn(track)`` must rebuild the loss from the current parameter arrays;
    with ``track=True`` it runs under a tape and returns the loss tensor.
    """
    with ag.Tape() as tape:
        loss = loss_fn(True)
    grads = ag.backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst, where = 0.0, None
    for name, arr in params.items():
        g = grads.get(name, np.zeros_like(arr))
        indices = list(np.ndindex(arr.shape))
        if max_entries is not None and len(indices) > max_entries:
            indices = [indices[i] for i in rng.choice(len(indices), max_entries, replace=False)]
        for idx in indices:
            old = arr[idx]
            arr[idx] = old + eps
            lp = float(loss_fn(False).data)
            arr[idx] = old - eps
            lm = float(loss_fn(False).data)
            arr[idx] = old
            err = rel_err((lp - lm) / (2 * eps), g[idx])
            if err > worst:
                worst, where = err, (name, idx)
    return worst, where


def check_inputs(fn, arrays, eps=EPS):
    """Gradient check of a scalar function of plain arrays: ``fn(*tensors) -> Tensor``."""
    tensors = [ag.Tensor(a, name=f"x{i}", requires_grad=True) for i, a in enumerate(arrays)]
    params = {t.name: t.data for t in tensors}

    def loss_fn(track):
        if track:
            return fn(*tensors)
        return fn(*[ag.Tensor(t.data) for t in tensors])

    return check_params(loss_fn, params, eps=eps)
