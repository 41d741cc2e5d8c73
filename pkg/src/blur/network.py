"""The bidirectional network: encoder, stacked blocks, pooling and output head.

Block data flow for encoded inputs ``u`` (batch, N, m)::

    hf = LRU_f(u)          hb = LRU_b(u)            complex, width n
    hm = Mf hf + Mb hb + c                          complex, width n
    z  = G(Re hm)                                   GLU or MLP, dropout inside
    y  = Norm(z + C u)                              real, width n

Parameters live in plain dataclasses of numpy arrays.  Complex matrices are
complex arrays; training reaches them through their ``.real``/``.imag`` views.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .lru import LruParams, RingInit, init_lru
from .scan import DEFAULT_BLOCK_SIZE, Direction, HiddenSequence

TASKS = ("regression", "classification", "labeling")
NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; defaults follow the published BLUR setup."""

    d_input: int = 7
    d_model: int = 256
    d_hidden: int = 128
    d_output: int = 7
    n_layers: int = 4
    task: str = "regression"
    nonlinearity: str = "glu"
    mlp_width: Optional[int] = None
    norm: str = "batch"
    dropout: float = 0.1
    e_min: float = 0.0
    e_max: float = 1.0
    phase_max: float = 2 * math.pi
    learn_gamma: bool = False
    bidirectional: bool = True
    block_size: int = DEFAULT_BLOCK_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.nonlinearity not in ("glu", "mlp"):
            raise ConfigError(f"nonlinearity must be 'glu' or 'mlp', got {self.nonlinearity!r}")
        if self.norm not in ("batch", "layer", "none"):
            raise ConfigError(f"norm must be 'batch', 'layer' or 'none', got {self.norm!r}")
        if self.n_layers < 1:
            raise ConfigError("the network needs at least one block")
        if min(self.d_input, self.d_model, self.d_hidden, self.d_output) < 1:
            raise ConfigError("all widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        RingInit(self.e_min, self.e_max, self.phase_max)

    @property
    def hidden_mlp(self) -> int:
        return self.mlp_width or 2 * self.d_hidden

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class BlurBlockParams:
    fwd: LruParams
    bwd: Optional[LruParams]
    merge_f: np.ndarray
    merge_b: Optional[np.ndarray]
    merge_bias: np.ndarray
    mlp: dict
    skip_C: np.ndarray
    norm_scale: np.ndarray
    norm_shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    nonlinearity: str = "glu"
    norm: str = "batch"
    dropout_rate: float = 0.0
    learn_gamma: bool = False
    block_size: int = DEFAULT_BLOCK_SIZE

    def __post_init__(self):
        if self.fwd.direction is not Direction.FORWARD:
            raise ContractError("block fwd LRU must run forward")
        if self.bwd is not None and self.bwd.direction is not Direction.BACKWARD:
            raise ContractError("block bwd LRU must run backward")
        n = self.fwd.width
        if self.merge_f.shape != (n, n) or (self.merge_b is not None and self.merge_b.shape != (n, n)):
            raise DimensionError("merge matrices must be n x n")

    @property
    def width(self) -> int:
        return self.fwd.width

    @property
    def input_dim(self) -> int:
        return self.fwd.input_dim

    @property
    def bidirectional(self) -> bool:
        return self.bwd is not None


@dataclass
class BlurModelParams:
    config: ModelConfig
    encoder_W: np.ndarray
    encoder_b: np.ndarray
    blocks: list
    head_W: np.ndarray
    head_b: np.ndarray
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def task(self) -> str:
        return self.config.task


# -- initialization --------------------------------------------------------------


def _init_block(cfg: ModelConfig, m_in: int, rng: np.random.Generator) -> BlurBlockParams:
    n, hidden = cfg.d_hidden, cfg.hidden_mlp
    seeds = rng.integers(0, 2**63 - 1, size=2)
    ring = dict(e_min=cfg.e_min, e_max=cfg.e_max, phase_max=cfg.phase_max)
    fwd = init_lru(n, m_in, RingInit(seed=int(seeds[0]), **ring), Direction.FORWARD)
    bwd = init_lru(n, m_in, RingInit(seed=int(seeds[1]), **ring), Direction.BACKWARD) if cfg.bidirectional else None

    def cmat():
        s = 1.0 / math.sqrt(4 * n)
        return rng.normal(0.0, s, (n, n)) + 1j * rng.normal(0.0, s, (n, n))

    merge_f = cmat()
    merge_b = cmat() if cfg.bidirectional else None
    if cfg.nonlinearity == "glu":
        mlp = {
            "W_a": rng.normal(0.0, 1.0 / math.sqrt(n), (n, hidden)),
            "b_a": np.zeros(hidden),
            "W_g": rng.normal(0.0, 1.0 / math.sqrt(n), (n, hidden)),
            "b_g": np.zeros(hidden),
            "W_o": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n)),
            "b_o": np.zeros(n),
        }
    else:
        mlp = {
            "W_1": rng.normal(0.0, 1.0 / math.sqrt(n), (n, hidden)),
            "b_1": np.zeros(hidden),
            "W_2": rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, n)),
            "b_2": np.zeros(n),
        }
    return BlurBlockParams(
        fwd=fwd,
        bwd=bwd,
        merge_f=merge_f,
        merge_b=merge_b,
        merge_bias=np.zeros(n, dtype=np.complex128),
        mlp=mlp,
        skip_C=np.eye(n, m_in),
        norm_scale=np.ones(n),
        norm_shift=np.zeros(n),
        running_mean=np.zeros(n),
        running_var=np.ones(n),
        nonlinearity=cfg.nonlinearity,
        norm=cfg.norm,
        dropout_rate=cfg.dropout,
        learn_gamma=cfg.learn_gamma,
        block_size=cfg.block_size,
    )


def init_model(cfg: ModelConfig) -> BlurModelParams:
    rng = np.random.default_rng(cfg.seed)
    d, m, n, s = cfg.d_input, cfg.d_model, cfg.d_hidden, cfg.d_output
    encoder_W = rng.normal(0.0, 1.0 / math.sqrt(d), (d, m))
    blocks = [_init_block(cfg, m if i == 0 else n, rng) for i in range(cfg.n_layers)]
    head_W = rng.normal(0.0, 1.0 / math.sqrt(n), (n, s))
    return BlurModelParams(cfg, encoder_W, np.zeros(m), blocks, head_W, np.zeros(s))


# -- parameter naming ------------------------------------------------------------


def _block_entries(block: BlurBlockParams, prefix: str):
    """Yield (name, array, kind) with kind in {'param', 'frozen', 'buffer'}."""
    for tag, lru in (("fwd", block.fwd), ("bwd", block.bwd)):
        if lru is None:
            continue
        yield f"{prefix}{tag}.nu_log", lru.nu_log, "param"
        yield f"{prefix}{tag}.theta", lru.theta, "param"
        yield f"{prefix}{tag}.B", lru.B, "param"
        yield f"{prefix}{tag}.gamma", lru.gamma, "param" if block.learn_gamma else "frozen"
    yield f"{prefix}merge_f", block.merge_f, "param"
    if block.merge_b is not None:
        yield f"{prefix}merge_b", block.merge_b, "param"
    yield f"{prefix}merge_bias", block.merge_bias, "param"
    for key in sorted(block.mlp):
        yield f"{prefix}mlp.{key}", block.mlp[key], "param"
    yield f"{prefix}skip_C", block.skip_C, "param"
    yield f"{prefix}norm.scale", block.norm_scale, "param"
    yield f"{prefix}norm.shift", block.norm_shift, "param"
    yield f"{prefix}norm.running_mean", block.running_mean, "buffer"
    yield f"{prefix}norm.running_var", block.running_var, "buffer"


def _model_entries(model: BlurModelParams):
    yield "encoder.W", model.encoder_W, "param"
    yield "encoder.b", model.encoder_b, "param"
    for i, block in enumerate(model.blocks):
        yield from _block_entries(block, f"blocks.{i}.")
    yield "head.W", model.head_W, "param"
    yield "head.b", model.head_b, "param"


def state_dict(model: BlurModelParams) -> dict:
    """All arrays (learnable, frozen and buffers) by name; complex arrays stay complex."""
    return {name: arr for name, arr, _ in _model_entries(model)}


def _real_views(name, arr):
    if np.iscomplexobj(arr):
        return [(f"{name}.re", arr.real), (f"{name}.im", arr.imag)]
    return [(name, arr)]


def named_parameters(model_or_block, prefix: str = "") -> dict:
    """Learnable parameters as writable real views, keyed by name."""
    if isinstance(model_or_block, BlurModelParams):
        entries = _model_entries(model_or_block)
    else:
        entries = _block_entries(model_or_block, prefix)
    out = {}
    for name, arr, kind in entries:
        if kind == "param":
            out.update(_real_views(name, arr))
    return out


def count_parameters(model) -> int:
    return int(sum(v.size for v in named_parameters(model).values()))


def _bind(entries, track: bool) -> dict:
    bound = {}
    for name, arr, kind in entries:
        learn = track and kind == "param"
        for key, view in _real_views(name, arr):
            bound[key] = Tensor(view, name=key if learn else None, requires_grad=learn)
    return bound


# -- taped forward pieces --------------------------------------------------------


def _eigen_planes(P, pre):
    radius = ag.exp(-ag.exp(P[pre + "nu_log"]))
    theta = P[pre + "theta"]
    return radius * ag.cos(theta), radius * ag.sin(theta)


def _lru_planes(P, pre, u, reverse, block_size):
    lam_re, lam_im = _eigen_planes(P, pre)
    gamma = P[pre + "gamma"]
    b_re = (u @ P[pre + "B.re"].T) * gamma
    b_im = (u @ P[pre + "B.im"].T) * gamma
    h = ag.linear_scan(lam_re, lam_im, b_re, b_im, reverse=reverse, block_size=block_size)
    return h[0], h[1]


def _merge_planes(P, pre, hf, hb, imag=False):
    """Complex-linear merge; returns the real plane (and the imaginary plane if asked)."""
    fr, fi = hf
    re = fr @ P[pre + "merge_f.re"].T - fi @ P[pre + "merge_f.im"].T + P[pre + "merge_bias.re"]
    if hb is not None:
        br, bi = hb
        re = re + br @ P[pre + "merge_b.re"].T - bi @ P[pre + "merge_b.im"].T
    if not imag:
        return re, None
    im = fr @ P[pre + "merge_f.im"].T + fi @ P[pre + "merge_f.re"].T + P[pre + "merge_bias.im"]
    if hb is not None:
        br, bi = hb
        im = im + br @ P[pre + "merge_b.im"].T + bi @ P[pre + "merge_b.re"].T
    return re, im


def _nonlinear(P, pre, x, kind, rate, train, rng):
    if kind == "glu":
        hidden = (x @ P[pre + "mlp.W_a"] + P[pre + "mlp.b_a"]) * ag.sigmoid(x @ P[pre + "mlp.W_g"] + P[pre + "mlp.b_g"])
        if train:
            hidden = ag.dropout(hidden, rate, rng)
        return hidden @ P[pre + "mlp.W_o"] + P[pre + "mlp.b_o"]
    hidden = ag.sigmoid(x @ P[pre + "mlp.W_1"] + P[pre + "mlp.b_1"])
    if train:
        hidden = ag.dropout(hidden, rate, rng)
    return hidden @ P[pre + "mlp.W_2"] + P[pre + "mlp.b_2"]


def _normalize(P, pre, block, y, train, stats):
    if block.norm == "none":
        return y
    if block.norm == "layer":
        mu = ag.mean(y, axis=-1, keepdims=True)
        centered = y - mu
        var = ag.mean(centered * centered, axis=-1, keepdims=True)
        yhat = centered / ag.power(var + NORM_EPS, 0.5)
    elif train:
        axes = tuple(range(y.ndim - 1))
        mu = ag.mean(y, axis=axes, keepdims=True)
        centered = y - mu
        var = ag.mean(centered * centered, axis=axes, keepdims=True)
        yhat = centered / ag.power(var + NORM_EPS, 0.5)
        if stats is not None:
            count = y.data.size // y.shape[-1]
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            stats[pre] = (mu.data.reshape(-1).copy(), unbiased)
    else:
        yhat = (y - block.running_mean) / np.sqrt(block.running_var + NORM_EPS)
    return yhat * P[pre + "norm.scale"] + P[pre + "norm.shift"]


def _check_finite(t: Tensor, where: str):
    if not np.all(np.isfinite(t.data)):
        bad = np.argwhere(~np.isfinite(t.data))[0]
        step = int(bad[-2]) if t.ndim >= 2 else 0
        raise NumericError(f"non-finite value in {where} at time step {step}")


def _block_tape(P, pre, block, u, train, rng, stats, index=0):
    hf = _lru_planes(P, pre + "fwd.", u, False, block.block_size)
    hb = _lru_planes(P, pre + "bwd.", u, True, block.block_size) if block.bidirectional else None
    merged, _ = _merge_planes(P, pre, hf, hb)
    z = _nonlinear(P, pre, merged, block.nonlinearity, block.dropout_rate, train, rng)
    y = z + u @ P[pre + "skip_C"].T
    y = _normalize(P, pre, block, y, train, stats)
    _check_finite(y, f"block {index}")
    return y


def forward_tape(model: BlurModelParams, v, train: bool, rng=None, track: bool = False, stats=None):
    """Taped forward pass; returns (predictions tensor, bound parameter tensors)."""
    v = np.asarray(v, dtype=np.float64)
    cfg = model.config
    if v.ndim != 3 or v.shape[-1] != cfg.d_input:
        raise DimensionError(f"expected inputs of shape (batch, N, {cfg.d_input}), got {v.shape}")
    if train and rng is None:
        rng = np.random.default_rng(0)
    P = _bind(_model_entries(model), track)
    x = Tensor(v) @ P["encoder.W"] + P["encoder.b"]
    for i, block in enumerate(model.blocks):
        x = _block_tape(P, f"blocks.{i}.", block, x, train, rng, stats, index=i)
    if cfg.task == "classification":
        x = ag.mean(x, axis=1)
    out = x @ P["head.W"] + P["head.b"]
    return out, P


def update_running_stats(model: BlurModelParams, stats: dict, momentum: float = NORM_MOMENTUM):
    for i, block in enumerate(model.blocks):
        entry = stats.get(f"blocks.{i}.")
        if entry is None:
            continue
        mu, var = entry
        block.running_mean *= 1.0 - momentum
        block.running_mean += momentum * mu
        block.running_var *= 1.0 - momentum
        block.running_var += momentum * var


# -- public array API ------------------------------------------------------------


def encode(model: BlurModelParams, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.encoder_W.shape[0]:
        raise DimensionError(f"input feature dim {v.shape[-1]} does not match encoder ({model.encoder_W.shape[0]})")
    return v @ model.encoder_W + model.encoder_b


def merge(hf: HiddenSequence, hb: Optional[HiddenSequence], block: BlurBlockParams) -> HiddenSequence:
    """Merge forward and backward hidden states into one width-n complex sequence."""
    if hf.direction is not Direction.FORWARD:
        raise ContractError(f"first argument must be a forward sequence, got {hf.direction.value}")
    if hb is not None:
        if hb.direction is not Direction.BACKWARD:
            raise ContractError(f"second argument must be a backward sequence, got {hb.direction.value}")
        if hb.values.shape != hf.values.shape:
            raise DimensionError(f"hidden sequences differ in shape: {hf.values.shape} vs {hb.values.shape}")
    if hf.width != block.width:
        raise DimensionError(f"hidden width {hf.width} does not match block width {block.width}")
    out = hf.values @ block.merge_f.T + block.merge_bias
    if hb is not None and block.merge_b is not None:
        out = out + hb.values @ block.merge_b.T
    return HiddenSequence(out, Direction.MERGED)


def block_forward(block: BlurBlockParams, u, train_mode: bool = False, rng=None, index: int = 0) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != block.input_dim:
        raise DimensionError(f"block input dim {u.shape[-1]} does not match {block.input_dim}")
    squeeze = u.ndim == 2
    if squeeze:
        u = u[None]
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    P = _bind(_block_entries(block, ""), track=False)
    y = _block_tape(P, "", block, Tensor(u), train_mode, rng, None, index=index).data
    return y[0] if squeeze else y


def model_forward(model: BlurModelParams, v, train_mode: bool = False, rng=None) -> np.ndarray:
    out, _ = forward_tape(model, v, train_mode, rng=rng)
    return out.data


def unidirectional_copy(model: BlurModelParams) -> BlurModelParams:
    """A forward-only network sharing (copies of) every parameter except the backward path."""
    import copy

    cfg = ModelConfig.from_dict({**model.config.to_dict(), "bidirectional": False})
    blocks = []
    for block in model.blocks:
        b = copy.deepcopy(block)
        b.bwd = None
        b.merge_b = None
        blocks.append(b)
    return BlurModelParams(cfg, model.encoder_W.copy(), model.encoder_b.copy(), blocks,
                           model.head_W.copy(), model.head_b.copy())


def matched_unidirectional_config(cfg: ModelConfig) -> ModelConfig:
    """Forward-only config whose hidden width gives the closest parameter count to ``cfg``."""
    target = count_parameters(init_model(cfg))
    best, best_gap = None, None
    for n in range(cfg.d_hidden, 4 * cfg.d_hidden + 1):
        trial = ModelConfig.from_dict({**cfg.to_dict(), "bidirectional": False, "d_hidden": n,
                                       "mlp_width": cfg.mlp_width and cfg.mlp_width * n // cfg.d_hidden})
        gap = abs(count_parameters(init_model(trial)) - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = trial, gap
        elif count_parameters(init_model(trial)) > target:
            break
    return best
