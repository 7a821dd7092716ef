"""Graph-attention + GRU sequence model for per-lane queue prediction.

Pipeline for one simulation ``X[t, lane, feature]``:

1. two graph-attention layers mix features between lanes connected in the
   adjacency matrix (same weights for every timestep),
2. two dense layers,
3. a GRU encoder runs over each lane's sequence independently,
4. a GRU decoder with additive attention over the encoder states of the
   current and earlier steps emits two targets per timestep.

Graph attention head, for node ``i`` with neighbourhood ``N_i`` (``A_ij = 1``)::

    e_ij   = leaky_relu(a . [W h_i || W h_j])
    alpha  = softmax_j(e_ij) over N_i
    h'_i   = tanh(sum_j alpha_ij W h_j)

GRU step::

    r = sigmoid(W_r x + U_r h + b_r)
    z = sigmoid(W_z x + U_z h + b_z)
    h~ = tanh(W x + U (r * h) + b)
    h_new = (1 - z) * h + z * h~

Decoder step ``i`` with context ``c_i = sum_{j<=i} alpha_ij h_j`` and
``e_ij = v_a . tanh(W_a s_{i-1} + U_a h_j)``: the GRU gates additionally get
``C c_i`` terms and take the previous output ``y_{i-1}`` as input; the output is
``y_i = W_o y_{i-1} + U_o s_{i-1} + C_o c_i + b_o``. ``y_0 = 0`` and
``s_0 = tanh(W_s h_1)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .nn import tensor as T
from .nn.functional import dropout, l2_penalty, mse_loss
from .nn.params import ParamSet, glorot_uniform
from .nn.tensor import ShapeMismatch, Tensor, as_tensor


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = 8
    out_features: int = 2
    gat_width: int = 128
    heads: int = 2
    gat1_combine: str = "concat"
    gat2_combine: str = "average"
    dense_width: int = 128
    hidden: int = 128  # encoder and decoder state width
    attn_slope: float = 0.2

    def __post_init__(self):
        for mode in (self.gat1_combine, self.gat2_combine):
            if mode not in ("concat", "average"):
                raise ValueError(f"unknown head combine mode {mode!r}")
        if self.heads < 1:
            raise ValueError("need at least one attention head")
        if self.gat1_combine == "concat" and self.gat_width % self.heads:
            raise ValueError("concat width must be divisible by the head count")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


# --------------------------------------------------------------------------
# parameter views


@dataclass
class GatParams:
    W: list[Tensor]  # per head, (F', F)
    a: list[Tensor]  # per head, (2F',)
    combine: str = "concat"
    slope: float = 0.2

    @property
    def heads(self) -> int:
        return len(self.W)


@dataclass
class GruParams:
    W: Tensor
    U: Tensor
    b: Tensor
    W_r: Tensor
    U_r: Tensor
    b_r: Tensor
    W_z: Tensor
    U_z: Tensor
    b_z: Tensor


@dataclass
class AttnDecoderParams:
    W_a: Tensor  # (n_a, hidden)  applied to s_{i-1}
    U_a: Tensor  # (n_a, enc)     applied to h_j
    v_a: Tensor  # (n_a,)
    gru: GruParams  # input is y_{i-1}
    C: Tensor  # context terms of candidate, reset and update
    C_r: Tensor
    C_z: Tensor
    W_s: Tensor  # (hidden, enc)
    W_o: Tensor  # (out, out)
    U_o: Tensor  # (out, hidden)
    C_o: Tensor  # (out, enc)
    b_o: Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    params: ParamSet
    gat1: GatParams
    gat2: GatParams
    dense1: tuple[Tensor, Tensor]
    dense2: tuple[Tensor, Tensor]
    encoder: GruParams
    decoder: AttnDecoderParams


def _gru_params(ps: ParamSet, prefix: str, n_in: int, n_h: int, rng) -> GruParams:
    t = {}
    for gate in ("", "_r", "_z"):
        t["W" + gate] = ps.add(f"{prefix}.W{gate}", glorot_uniform(rng, (n_h, n_in)))
        t["U" + gate] = ps.add(f"{prefix}.U{gate}", glorot_uniform(rng, (n_h, n_h)))
        t["b" + gate] = ps.add(f"{prefix}.b{gate}", np.zeros(n_h), weight=False)
    return GruParams(**t)


def _gat_params(ps, prefix, n_in, width, heads, combine, slope, rng) -> GatParams:
    per_head = width // heads if combine == "concat" else width
    W = [ps.add(f"{prefix}.h{k}.W", glorot_uniform(rng, (per_head, n_in))) for k in range(heads)]
    a = [ps.add(f"{prefix}.h{k}.a", glorot_uniform(rng, (2 * per_head,))) for k in range(heads)]
    return GatParams(W, a, combine, slope)


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases and a zero output-feedback matrix."""
    rng = np.random.default_rng(seed)
    c = config
    ps = ParamSet()
    gat1 = _gat_params(ps, "gat1", c.in_features, c.gat_width, c.heads, c.gat1_combine, c.attn_slope, rng)
    gat2 = _gat_params(ps, "gat2", c.gat_width, c.gat_width, c.heads, c.gat2_combine, c.attn_slope, rng)
    d1 = (ps.add("dense1.W", glorot_uniform(rng, (c.dense_width, c.gat_width))),
          ps.add("dense1.b", np.zeros(c.dense_width), weight=False))
    d2 = (ps.add("dense2.W", glorot_uniform(rng, (c.dense_width, c.dense_width))),
          ps.add("dense2.b", np.zeros(c.dense_width), weight=False))
    enc = _gru_params(ps, "enc", c.dense_width, c.hidden, rng)
    H, out = c.hidden, c.out_features
    dec = AttnDecoderParams(
        W_a=ps.add("dec.W_a", glorot_uniform(rng, (H, H))),
        U_a=ps.add("dec.U_a", glorot_uniform(rng, (H, H))),
        v_a=ps.add("dec.v_a", glorot_uniform(rng, (H,))),
        gru=_gru_params(ps, "dec", out, H, rng),
        C=ps.add("dec.C", glorot_uniform(rng, (H, H))),
        C_r=ps.add("dec.C_r", glorot_uniform(rng, (H, H))),
        C_z=ps.add("dec.C_z", glorot_uniform(rng, (H, H))),
        W_s=ps.add("dec.W_s", glorot_uniform(rng, (H, H))),
        # zero start keeps the linear output recursion y_i = W_o y_{i-1} + ... from
        # growing geometrically over long free-running sequences
        W_o=ps.add("dec.W_o", np.zeros((out, out))),
        U_o=ps.add("dec.U_o", glorot_uniform(rng, (out, H))),
        C_o=ps.add("dec.C_o", glorot_uniform(rng, (out, H))),
        b_o=ps.add("dec.b_o", np.zeros(out), weight=False),
    )
    return ModelParams(c, ps, gat1, gat2, d1, d2, enc, dec)


def model_from_params(config: ModelConfig, ps: ParamSet) -> ModelParams:
    """Rebuild the structured views over a loaded parameter set."""
    m = init_model(config, 0)
    for name, t in ps.items():
        if name not in m.params or m.params[name].shape != t.shape:
            raise ShapeMismatch(f"checkpoint parameter {name} does not fit the config")
        m.params[name].value[...] = t.value
    return m


# --------------------------------------------------------------------------
# building blocks


def _lin(x, W) -> Tensor:
    """Row-vector convention: ``x @ W.T`` maps (..., in) to (..., out)."""
    return T.matmul(x, T.transpose(W))


def _expand(x: Tensor, axis: int) -> Tensor:
    shape = list(x.shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return T.reshape(x, tuple(shape))


def _gat_head_pre(H, A, W, a, slope) -> tuple[Tensor, Tensor]:
    """Attention-weighted sum before the output nonlinearity; ``H`` is (..., N, F)."""
    H = as_tensor(H)
    A = np.asarray(A)
    if H.shape[-2] != A.shape[0] or A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"features {H.shape} vs adjacency {A.shape}")
    if H.shape[-1] != W.shape[1]:
        raise ShapeMismatch(f"features {H.shape} vs weight {W.shape}")
    Wh = _lin(H, W)  # (..., N, F')
    Fp = W.shape[0]
    src = T.matmul(Wh, a[:Fp])  # (..., N)  a_1 . W h_i
    dst = T.matmul(Wh, a[Fp:])  # (..., N)  a_2 . W h_j
    e = T.leaky_relu(_expand(src, -1) + _expand(dst, -2), slope)
    alpha = T.softmax(e, axis=-1, mask=A > 0)
    return T.matmul(alpha, Wh), alpha


def gat_head(H, A, W, a, slope: float = 0.2) -> tuple[Tensor, Tensor]:
    """One attention head: ``(tanh(alpha W H), alpha)``."""
    Z, alpha = _gat_head_pre(H, A, W, a, slope)
    return T.tanh(Z), alpha


def gat_multi_head(H, A, p: GatParams) -> Tensor:
    pre = [_gat_head_pre(H, A, W, a, p.slope)[0] for W, a in zip(p.W, p.a)]
    if p.combine == "concat":
        return T.concat([T.tanh(z) for z in pre], axis=-1)
    total = pre[0]
    for z in pre[1:]:
        total = total + z
    return T.tanh(total * (1.0 / len(pre)))


def gru_step(p: GruParams, x, h_prev) -> Tensor:
    r = T.sigmoid(_lin(x, p.W_r) + _lin(h_prev, p.U_r) + p.b_r)
    z = T.sigmoid(_lin(x, p.W_z) + _lin(h_prev, p.U_z) + p.b_z)
    h_cand = T.tanh(_lin(x, p.W) + _lin(r * h_prev, p.U) + p.b)
    return (1.0 - z) * h_prev + z * h_cand


def encode(p: GruParams, X) -> Tensor:
    """Run the GRU over axis -2 of ``X`` (batch..., T, width) from a zero state.

    Input projections for every step are computed in one product up front.
    """
    X = as_tensor(X)
    steps = X.shape[-2]
    if steps < 1:
        raise ShapeMismatch("need at least one timestep")
    n_h = p.U.shape[0]
    Wx = _lin(X, p.W) + p.b
    Wrx = _lin(X, p.W_r) + p.b_r
    Wzx = _lin(X, p.W_z) + p.b_z
    h = Tensor(np.zeros(X.shape[:-2] + (n_h,)))
    states = []
    for t in range(steps):
        sl = (Ellipsis, t, slice(None))
        r = T.sigmoid(Wrx[sl] + _lin(h, p.U_r))
        z = T.sigmoid(Wzx[sl] + _lin(h, p.U_z))
        h_cand = T.tanh(Wx[sl] + _lin(r * h, p.U))
        h = (1.0 - z) * h + z * h_cand
        states.append(h)
    return T.stack(states, axis=-2)


def attention_context(s_prev, H_past, p: AttnDecoderParams, UaH=None) -> tuple[Tensor, Tensor]:
    """Context over the given encoder states ``H_past`` (..., i, enc).

    Returns ``(c_i, alpha_i)``. ``UaH`` may carry precomputed ``U_a h_j``.
    """
    H_past = as_tensor(H_past)
    if UaH is None:
        UaH = _lin(H_past, p.U_a)
    scores = T.tanh(_expand(_lin(s_prev, p.W_a), -2) + UaH)  # (..., i, n_a)
    e = T.matmul(scores, p.v_a)  # (..., i)
    alpha = T.softmax(e, axis=-1)
    c = T.tsum(_expand(alpha, -1) * H_past, axis=-2)
    return c, alpha


def decoder_step(p: AttnDecoderParams, y_prev, s_prev, c) -> tuple[Tensor, Tensor]:
    g = p.gru
    r = T.sigmoid(_lin(y_prev, g.W_r) + _lin(s_prev, g.U_r) + _lin(c, p.C_r) + g.b_r)
    z = T.sigmoid(_lin(y_prev, g.W_z) + _lin(s_prev, g.U_z) + _lin(c, p.C_z) + g.b_z)
    s_cand = T.tanh(_lin(y_prev, g.W) + _lin(r * s_prev, g.U) + _lin(c, p.C) + g.b)
    s = (1.0 - z) * s_prev + z * s_cand
    y = _lin(y_prev, p.W_o) + _lin(s_prev, p.U_o) + _lin(c, p.C_o) + p.b_o
    return y, s


def decode(p: AttnDecoderParams, H) -> Tensor:
    """Free-running attention decoder over encoder states (..., T, enc) -> (..., T, out)."""
    H = as_tensor(H)
    steps = H.shape[-2]
    UaH = _lin(H, p.U_a)
    s = T.tanh(_lin(H[Ellipsis, 0, slice(None)], p.W_s))
    y = Tensor(np.zeros(H.shape[:-2] + (p.W_o.shape[0],)))
    outputs = []
    for i in range(steps):
        past = (Ellipsis, slice(0, i + 1), slice(None))
        c, _ = attention_context(s, H[past], p, UaH[past])
        y, s = decoder_step(p, y, s, c)
        outputs.append(y)
    return T.stack(outputs, axis=-2)


# --------------------------------------------------------------------------
# full model


def forward_one(
    m: ModelParams, X, A, rate: float = 0.0, rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """One simulation ``X`` (T, N, F) -> predictions (T, N, out)."""
    X = as_tensor(X)
    if X.ndim != 3 or X.shape[-1] != m.config.in_features:
        raise ShapeMismatch(f"expected (T, N, {m.config.in_features}), got {X.shape}")
    h = dropout(gat_multi_head(X, A, m.gat1), rate, rng, training)
    h = dropout(gat_multi_head(h, A, m.gat2), rate, rng, training)
    h = dropout(T.relu(_lin(h, m.dense1[0]) + m.dense1[1]), rate, rng, training)
    h = dropout(T.relu(_lin(h, m.dense2[0]) + m.dense2[1]), rate, rng, training)
    seq = T.transpose(h, (1, 0, 2))  # (N, T, width): one sequence per lane
    y = decode(m.decoder, encode(m.encoder, seq))
    return T.transpose(y, (1, 0, 2))


def model_forward(m: ModelParams, X, A) -> np.ndarray:
    """Inference on (sims, T, N, F) -> (sims, T, N, out) with dropout off."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 4:
        raise ShapeMismatch(f"expected 4 axes, got {X.shape}")
    return np.stack([forward_one(m, x, A).value for x in X]) if len(X) else np.zeros(
        X.shape[:3] + (m.config.out_features,))


def model_loss(
    m: ModelParams, X, Y, A, lam: float = 0.0, rate: float = 0.0,
    rng: np.random.Generator | None = None, training: bool = True,
) -> Tensor:
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if X.ndim == 3:
        X, Y = X[None], Y[None]
    if Y.shape != X.shape[:3] + (m.config.out_features,):
        raise ShapeMismatch(f"targets {Y.shape} do not match inputs {X.shape}")
    preds = [forward_one(m, x, A, rate, rng, training) for x in X]
    pred = preds[0] if len(preds) == 1 else T.stack(preds, axis=0)
    loss = mse_loss(pred, Y if len(preds) > 1 else Y[0])
    if lam > 0:
        loss = loss + l2_penalty(m.params.weights(), lam)
    return loss


def model_loss_and_grads(
    m: ModelParams, X, Y, A, lam: float = 0.0, rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    m.params.zero_grad()
    loss = model_loss(m, X, Y, A, lam, rate, rng, training=rate > 0)
    loss.backward()
    grads = m.params.grads()
    m.params.zero_grad()
    return float(loss.value), grads


def save_model(m: ModelParams, path, extra: dict | None = None) -> None:
    m.params.save(path, extra)
    Path(str(path) + ".config.json").write_text(m.config.to_json())


def load_model(path) -> tuple[ModelParams, dict]:
    config = ModelConfig.from_json(Path(str(path) + ".config.json").read_text())
    ps, extra = ParamSet.load(path)
    return model_from_params(config, ps), extra
