"""Shared-encoder LSTM with three task towers, implemented directly in numpy.

Parameters are kept in a flat ``dict`` of named float64 arrays so that the
optimizer, the serializer and the gradient checker can all walk the same
structure.  The LSTM gate blocks are concatenated column-wise in the order
forget, input, candidate, output::

    U: (n_inp, 4 * n_c)   W: (n_c, 4 * n_c)   b: (4 * n_c,)
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..dataset import REFLECTANCE_RANGE_DB, WindowSample, resolve_feature_set
from ..errors import InvalidArgument, NumericOverflow

TASKS = ("detect", "position", "reflectance")
DEFAULT_LOSS_WEIGHTS = (0.5, 0.3, 0.2)
BCE_EPS = 1e-7


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class ArchSpec:
    window_len: int = 35
    n_c: int = 30
    tower_width: int = 15
    tower_depth: int = 1
    n_task_out: int = 1
    n_aux: int = 0
    aux_mode: str = "concat"  # "concat": after the encoder; "replicate": appended to every timestep

    def __post_init__(self):
        if self.n_c < 1 or self.tower_width < 1 or self.tower_depth < 1:
            raise InvalidArgument("n_c, tower_width and tower_depth must be >= 1")
        if self.n_task_out != 1:
            raise InvalidArgument("each task head has exactly one output")
        if self.aux_mode not in ("concat", "replicate"):
            raise InvalidArgument(f"unknown aux_mode {self.aux_mode!r}")
        if self.window_len < 1 or self.n_aux < 0:
            raise InvalidArgument("window_len must be >= 1 and n_aux >= 0")

    @property
    def tasks(self) -> tuple[str, ...]:
        return TASKS

    @property
    def n_inp(self) -> int:
        return 1 + (self.n_aux if self.aux_mode == "replicate" else 0)

    @property
    def n_enc(self) -> int:
        return self.n_c + (self.n_aux if self.aux_mode == "concat" else 0)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        n = self.n_c
        shapes = {"lstm.U": (self.n_inp, 4 * n), "lstm.W": (n, 4 * n), "lstm.b": (4 * n,)}
        for task in TASKS:
            fan_in = self.n_enc
            for k in range(self.tower_depth):
                shapes[f"{task}.dense{k}.W"] = (fan_in, self.tower_width)
                shapes[f"{task}.dense{k}.b"] = (self.tower_width,)
                fan_in = self.tower_width
            shapes[f"{task}.head.W"] = (fan_in, self.n_task_out)
            shapes[f"{task}.head.b"] = (self.n_task_out,)
        return shapes


@dataclass(frozen=True)
class LstmParams:
    U: np.ndarray
    W: np.ndarray
    b: np.ndarray

    @property
    def n_c(self) -> int:
        return self.W.shape[0]


@dataclass
class ModelParams:
    arch: ArchSpec
    params: dict[str, np.ndarray]
    loss_weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    feature_set: tuple[str, ...] = ()
    aux_mean: np.ndarray | None = None
    aux_std: np.ndarray | None = None
    reflectance_range: tuple[float, float] = REFLECTANCE_RANGE_DB
    provenance: dict = field(default_factory=dict)

    @property
    def lstm(self) -> LstmParams:
        return LstmParams(self.params["lstm.U"], self.params["lstm.W"], self.params["lstm.b"])

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.params.items()},
                           self.loss_weights, self.feature_set,
                           None if self.aux_mean is None else self.aux_mean.copy(),
                           None if self.aux_std is None else self.aux_std.copy(),
                           self.reflectance_range, dict(self.provenance))

    def prepare_aux(self, aux_raw) -> np.ndarray | None:
        """Map raw setup values onto the standardized scale the model was trained on."""
        if self.arch.n_aux == 0:
            if aux_raw is not None:
                raise InvalidArgument("model takes no auxiliary inputs but aux values were given")
            return None
        if aux_raw is None:
            raise InvalidArgument(
                f"model expects {self.arch.n_aux} aux inputs {self.feature_set}, none given")
        a = np.atleast_2d(np.asarray(aux_raw, dtype=float))
        if a.shape[1] != self.arch.n_aux:
            raise InvalidArgument(f"model expects {self.arch.n_aux} aux inputs, got {a.shape[1]}")
        a = transform_aux(a, self.feature_set)
        mean = 0.0 if self.aux_mean is None else self.aux_mean
        std = 1.0 if self.aux_std is None else self.aux_std
        return (a - mean) / std


def transform_aux(aux_raw: np.ndarray, feature_set) -> np.ndarray:
    """Averaging counts span three decades; feed them on a log scale."""
    out = np.array(aux_raw, dtype=float)
    for j, name in enumerate(feature_set):
        if name == "n_avg":
            out[:, j] = np.log10(out[:, j])
    return out


def init_params(arch: ArchSpec, seed: int = 0, feature_set=(), aux_mean=None, aux_std=None,
                loss_weights=DEFAULT_LOSS_WEIGHTS) -> ModelParams:
    """Glorot-uniform matrices, zero biases except a forget-gate bias of 1."""
    feature_set = resolve_feature_set(feature_set)
    if len(feature_set) != arch.n_aux:
        raise InvalidArgument(f"feature set {feature_set} does not match n_aux={arch.n_aux}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if len(shape) == 2:
            fan_in, fan_out = shape
            if name in ("lstm.U", "lstm.W"):
                fan_out //= 4  # per gate block
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    params["lstm.b"][:arch.n_c] = 1.0
    return ModelParams(arch, params, tuple(loss_weights), feature_set,
                       None if aux_mean is None else np.asarray(aux_mean, dtype=float),
                       None if aux_std is None else np.asarray(aux_std, dtype=float))


def zero_params(arch: ArchSpec, feature_set=()) -> ModelParams:
    return ModelParams(arch, {k: np.zeros(s) for k, s in arch.param_shapes().items()},
                       feature_set=resolve_feature_set(feature_set))


# -- LSTM --------------------------------------------------------------------

def lstm_cell_forward(x_t, h_prev, c_prev, params: LstmParams):
    """One step of the standard LSTM cell; returns ``(h_t, c_t)``."""
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float))
    h_prev = np.asarray(h_prev, dtype=float)
    c_prev = np.asarray(c_prev, dtype=float)
    n = params.n_c
    if (params.U.shape != (x_t.shape[-1], 4 * n) or params.W.shape != (n, 4 * n)
            or params.b.shape != (4 * n,) or h_prev.shape[-1] != n or c_prev.shape[-1] != n):
        raise InvalidArgument("LSTM cell input shapes do not match the parameters")
    z = x_t @ params.U + h_prev @ params.W + params.b
    f = sigmoid(z[..., :n])
    i = sigmoid(z[..., n:2 * n])
    g = np.tanh(z[..., 2 * n:3 * n])
    o = sigmoid(z[..., 3 * n:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def lstm_sequence_forward(sequence, params: LstmParams) -> np.ndarray:
    """Run the cell over a ``(T, n_inp)`` sequence from zero state; return ``h_T``."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim == 1:
        seq = seq[:, None]
    if seq.shape[0] == 0:
        raise InvalidArgument("empty sequence")
    h = np.zeros(params.n_c)
    c = np.zeros(params.n_c)
    for x_t in seq:
        h, c = lstm_cell_forward(x_t, h, c, params)
    return h


def _encoder_inputs(arch: ArchSpec, X: np.ndarray, A: np.ndarray | None) -> np.ndarray:
    X = X[:, :, None]
    if arch.aux_mode == "replicate" and arch.n_aux:
        X = np.concatenate([X, np.broadcast_to(A[:, None, :], (X.shape[0], X.shape[1], arch.n_aux))],
                           axis=2)
    return X


def _forward(model: ModelParams, X: np.ndarray, A: np.ndarray | None, keep: bool):
    """Batched forward pass.  ``X`` is ``(B, T)``; ``A`` standardized aux or None."""
    arch = model.arch
    P = model.params
    n = arch.n_c
    B, T = X.shape
    Xin = _encoder_inputs(arch, X, A)
    XU = Xin @ P["lstm.U"] + P["lstm.b"]  # (B, T, 4n)
    W = P["lstm.W"]
    h = np.zeros((B, n))
    c = np.zeros((B, n))
    if keep:
        H = np.empty((B, T + 1, n))
        H[:, 0] = 0.0
        C = np.empty((B, T + 1, n))
        C[:, 0] = 0.0
        G = np.empty((B, T, 4 * n))
        TC = np.empty((B, T, n))
    for t in range(T):
        z = XU[:, t] + h @ W
        gates = sigmoid(z)
        gates[:, 2 * n:3 * n] = np.tanh(z[:, 2 * n:3 * n])
        c = gates[:, :n] * c + gates[:, n:2 * n] * gates[:, 2 * n:3 * n]
        tc = np.tanh(c)
        h = gates[:, 3 * n:] * tc
        if keep:
            H[:, t + 1] = h
            C[:, t + 1] = c
            G[:, t] = gates
            TC[:, t] = tc
    enc = h if not (arch.n_aux and arch.aux_mode == "concat") else np.concatenate([h, A], axis=1)

    outs = {}
    tower_cache = {}
    for task in TASKS:
        a = enc
        acts = [a]
        for k in range(arch.tower_depth):
            a = np.tanh(a @ P[f"{task}.dense{k}.W"] + P[f"{task}.dense{k}.b"])
            acts.append(a)
        outs[task] = (a @ P[f"{task}.head.W"] + P[f"{task}.head.b"])[:, 0]
        tower_cache[task] = acts
    outs["detect"] = sigmoid(outs["detect"])
    cache = (Xin, H, C, G, TC, tower_cache) if keep else None
    return outs, cache


def predict(model: ModelParams, features, aux_raw=None, chunk: int = 4096):
    """Vectorized inference: returns ``(p_event, position_pred, reflectance_pred)`` arrays."""
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[1] != model.arch.window_len:
        raise InvalidArgument(
            f"window length {X.shape[1]} does not match model window_len {model.arch.window_len}")
    A = model.prepare_aux(aux_raw)
    if A is not None and len(A) != len(X):
        raise InvalidArgument("aux rows do not match number of windows")
    parts = []
    for s in range(0, len(X), chunk):
        outs, _ = _forward(model, X[s:s + chunk], None if A is None else A[s:s + chunk], keep=False)
        parts.append(np.stack([outs[t] for t in TASKS], axis=1))
    res = np.concatenate(parts, axis=0) if parts else np.empty((0, 3))
    return res[:, 0], res[:, 1], res[:, 2]


def model_forward(window: WindowSample, model: ModelParams):
    """Single-window inference: ``(p_event, position_pred, reflectance_pred)``."""
    p, pos, refl = predict(model, np.asarray(window.features)[None, :],
                           None if window.aux is None else np.asarray(window.aux)[None, :])
    return float(p[0]), float(pos[0]), float(refl[0])


# -- loss and gradients ------------------------------------------------------

def _masked_mse(pred, target, mask):
    n_pos = int(mask.sum())
    if n_pos == 0:
        return 0.0, np.zeros_like(pred)
    err = np.where(mask, pred - np.where(mask, target, 0.0), 0.0)
    return float(np.sum(err * err) / n_pos), 2.0 * err / n_pos


def multitask_loss(pred, target, weights=DEFAULT_LOSS_WEIGHTS, return_parts: bool = False):
    """Weighted sum of BCE (detection) and positive-masked MSEs (position, reflectance).

    ``pred`` is ``(p_event, position, reflectance)``; ``target`` is
    ``(id_class, position_target, reflectance_target)``.  Regression terms
    average over windows with ``id_class == 1`` only and vanish when none.
    """
    p, pos, refl = (np.atleast_1d(np.asarray(v, dtype=float)) for v in pred)
    y, tpos, trefl = (np.atleast_1d(np.asarray(v, dtype=float)) for v in target)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    bce = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))
    mask = y == 1
    mse_pos, _ = _masked_mse(pos, tpos, mask)
    mse_refl, _ = _masked_mse(refl, trefl, mask)
    a, b, d = weights
    total = a * bce + b * mse_pos + d * mse_refl
    if return_parts:
        return total, (bce, mse_pos, mse_refl)
    return total


def loss_and_gradients(model: ModelParams, X, A, y, tpos, trefl, weights=None):
    """Loss of a batch and its exact gradient for every parameter block."""
    weights = model.loss_weights if weights is None else weights
    alpha, beta, delta = weights
    arch = model.arch
    P = model.params
    n = arch.n_c
    B, T = X.shape
    outs, (Xin, H, C, G, TC, tower_cache) = _forward(model, X, A, keep=True)
    p = outs["detect"]
    loss = multitask_loss((p, outs["position"], outs["reflectance"]), (y, tpos, trefl), weights)
    if not math.isfinite(loss):
        bad = [k for k, v in P.items() if not np.all(np.isfinite(v))]
        raise NumericOverflow(bad[0] if bad else "loss")

    mask = y == 1
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    d_out = {
        "detect": alpha * np.where(inside, p - y, 0.0) / B,
        "position": beta * _masked_mse(outs["position"], tpos, mask)[1],
        "reflectance": delta * _masked_mse(outs["reflectance"], trefl, mask)[1],
    }
    grads = {}
    d_enc = np.zeros((B, arch.n_enc))
    for task in TASKS:
        acts = tower_cache[task]
        g = d_out[task][:, None]
        grads[f"{task}.head.W"] = acts[-1].T @ g
        grads[f"{task}.head.b"] = g.sum(axis=0)
        da = g @ P[f"{task}.head.W"].T
        for k in reversed(range(arch.tower_depth)):
            dz = da * (1.0 - acts[k + 1] ** 2)
            grads[f"{task}.dense{k}.W"] = acts[k].T @ dz
            grads[f"{task}.dense{k}.b"] = dz.sum(axis=0)
            da = dz @ P[f"{task}.dense{k}.W"].T
        d_enc += da

    # backpropagation through time
    W = P["lstm.W"]
    WT = W.T
    dh = d_enc[:, :n].copy()
    dc = np.zeros((B, n))
    dZ = np.empty((B, T, 4 * n))
    for t in reversed(range(T)):
        gates = G[:, t]
        f, i, g, o = gates[:, :n], gates[:, n:2 * n], gates[:, 2 * n:3 * n], gates[:, 3 * n:]
        tc = TC[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dZ[:, t]
        dz[:, :n] = dc * C[:, t] * f * (1.0 - f)
        dz[:, n:2 * n] = dc * g * i * (1.0 - i)
        dz[:, 2 * n:3 * n] = dc * i * (1.0 - g * g)
        dz[:, 3 * n:] = dh * tc * o * (1.0 - o)
        dc = dc * f
        dh = dz @ WT
    flat = dZ.reshape(B * T, 4 * n)
    grads["lstm.U"] = Xin.reshape(B * T, -1).T @ flat
    grads["lstm.W"] = H[:, :T].reshape(B * T, n).T @ flat
    grads["lstm.b"] = flat.sum(axis=0)

    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise NumericOverflow(name)
    return loss, grads


def backprop_gradients(batch, model: ModelParams, weights=None):
    """Gradient of the multitask loss over ``batch`` (a Corpus or a list of WindowSamples)."""
    X, A_raw, y, tpos, trefl = batch_arrays(batch, model)
    if len(X) == 0:
        raise InvalidArgument("empty batch")
    return loss_and_gradients(model, X, model.prepare_aux(A_raw), y, tpos, trefl, weights)[1]


def batch_arrays(batch, model: ModelParams):
    """Pull ``(X, aux_raw, y, position_target, reflectance_target)`` out of a batch."""
    if hasattr(batch, "features") and hasattr(batch, "aux_matrix"):
        X = batch.features
        A = batch.aux_matrix(model.feature_set) if model.feature_set else None
        return X, A, batch.id_class.astype(float), batch.position_target, batch.reflectance_target
    samples = list(batch)
    X = np.array([s.features for s in samples], dtype=float)
    A = np.array([s.aux for s in samples], dtype=float) if model.arch.n_aux else None
    if not model.arch.n_aux and any(s.aux is not None for s in samples):
        raise InvalidArgument("model takes no auxiliary inputs but aux values were given")
    y = np.array([s.id_class for s in samples], dtype=float)
    nan = math.nan
    tpos = np.array([nan if s.position_target is None else s.position_target for s in samples])
    trefl = np.array([nan if s.reflectance_target is None else s.reflectance_target
                      for s in samples])
    return X, A, y, tpos, trefl

