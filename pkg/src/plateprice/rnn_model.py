"""Deep bidirectional ReLU recurrent regressor over plate characters.

Layout of the network, for a batch of token sequences of length T:

* embedding lookup per time step, then dropout;
* ``recurrent_layers`` bidirectional layers.  Each direction computes
  ``relu(BN(W x_t + U h_prev))`` where ``h_prev`` is the previous (forward
  direction) or next (backward direction) hidden state, zero at the
  boundaries.  BN uses per-(layer, direction, step) batch statistics and a
  per-layer scale/shift shared by both directions and all steps.  The two
  directions are concatenated and dropout is applied;
* the final recurrent outputs are summed over all time steps;
* ``fc_layers - 1`` hidden ReLU layers (each followed by dropout) and a final
  linear unit giving the log price.

All arrays are time-major ``(T, B, features)`` float64.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .numerics import DTYPE, NonFiniteError, ShapeError
from .plate_data import SEQ_LEN, VOCAB_SIZE

BN_EPS = 1e-4
BN_MOMENTUM = 0.9
ADAGRAD_EPS = 1e-8
DIRECTIONS = ("fwd", "bwd")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 24
    recurrent_layers: int = 3
    fc_layers: int = 1
    hidden_units: int = 128
    dropout_rate: float = 0.05
    seq_len: int = SEQ_LEN
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        for name in ("embed_dim", "recurrent_layers", "fc_layers", "hidden_units", "seq_len", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def label(self) -> str:
        """``hidden-embed-rec-fc-dropout``, e.g. ``1024-24-7-1-.05``."""
        p = f"{self.dropout_rate:g}"
        if p.startswith("0."):
            p = p[1:]
        return f"{self.hidden_units}-{self.embed_dim}-{self.recurrent_layers}-{self.fc_layers}-{p}"

    @classmethod
    def from_label(cls, label: str) -> "ModelConfig":
        hidden, embed, rec, fc, p = label.split("-")
        return cls(embed_dim=int(embed), recurrent_layers=int(rec), fc_layers=int(fc),
                   hidden_units=int(hidden), dropout_rate=float(p))


@dataclass
class BatchNormState:
    """Running statistics indexed ``[layer, direction, step, unit]``."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, config: ModelConfig) -> "BatchNormState":
        shape = (config.recurrent_layers, 2, config.seq_len, config.hidden_units)
        return cls(np.zeros(shape, DTYPE), np.ones(shape, DTYPE))


@dataclass
class Network:
    config: ModelConfig
    params: dict
    bn: BatchNormState

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.bn))


def param_shapes(config: ModelConfig) -> dict:
    H, E = config.hidden_units, config.embed_dim
    shapes = {"embedding": (config.vocab_size, E)}
    for l in range(config.recurrent_layers):
        n_in = E if l == 0 else 2 * H
        for d in DIRECTIONS:
            shapes[f"rec{l}.{d}.W"] = (H, n_in)
            shapes[f"rec{l}.{d}.U"] = (H, H)
        shapes[f"rec{l}.gamma"] = (H,)
        shapes[f"rec{l}.beta"] = (H,)
    n_in = 2 * H
    for k in range(config.fc_layers):
        n_out = 1 if k == config.fc_layers - 1 else H
        shapes[f"fc{k}.W"] = (n_out, n_in)
        shapes[f"fc{k}.b"] = (n_out,)
        n_in = n_out
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> Network:
    """Glorot-uniform weights, uniform(-0.1, 0.1) embedding, gamma=1, beta=0, zero biases."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "embedding":
            params[name] = rng.uniform(-0.1, 0.1, size=shape)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, DTYPE)
        elif name.endswith((".beta", ".b")):
            params[name] = np.zeros(shape, DTYPE)
        else:
            r = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-r, r, size=shape)
    return Network(config, params, BatchNormState.fresh(config))


# ------------------------------------------------------------- batch norm

def batchnorm_forward(x, gamma, beta, mode, running_mean, running_var,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Normalize ``x`` (batch, units). Train mode updates the running arrays in place.

    Returns ``(out, cache)``; ``cache`` is ``(xhat, inv_std)``.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("train-mode batch norm needs a batch of at least 2")
        mu = x.mean(axis=0)
        xc = x - mu
        var = np.einsum("ij,ij->j", xc, xc) / x.shape[0]
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "infer":
        xc = x - running_mean
        var = running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return gamma * xhat + beta, (xhat, inv_std)


def batchnorm_backward(dout, gamma, cache):
    """Gradients through train-mode batch norm: ``(dx, dgamma, dbeta)``."""
    xhat, inv_std = cache
    n = dout.shape[0]
    dgamma = np.einsum("ij,ij->j", dout, xhat)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.einsum("ij,ij->j", dxhat, xhat))
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- forward

def _dropout_mask(shape, p, rng):
    """Boolean keep-mask; callers rescale kept units by ``1 / (1 - p)``."""
    return rng.random(shape, dtype=np.float32) >= np.float32(p)


def _apply_mask(x, mask, p):
    out = np.multiply(x, mask)
    out *= 1.0 / (1.0 - p)
    return out


def _scan(A, U, gamma, beta, mode, rm, rv, reverse, momentum, eps, h):
    """Run one recurrent direction over pre-projected inputs ``A`` (T, B, H), writing into ``h``."""
    T, B, H = A.shape
    xhat = np.empty((T, B, H)) if mode == "train" else None
    inv = np.empty((T, H))
    prev = None
    steps = range(T - 1, -1, -1) if reverse else range(T)
    Ut = U.T
    for t in steps:
        pre = np.ascontiguousarray(A[t]) if prev is None else A[t] + prev @ Ut
        if mode == "train":
            if B < 2:
                raise ValueError("train-mode batch norm needs a batch of at least 2")
            inv[t] = _kernels.bn_relu_train(pre, gamma, beta, rm[t], rv[t], momentum, eps, h[t], xhat[t])
        else:
            inv[t] = _kernels.bn_relu_infer(pre, gamma, beta, rm[t], rv[t], eps, h[t])
        prev = h[t]
    return xhat, inv


def forward(net: Network, tokens, mode: str = "infer", rng: np.random.Generator | None = None):
    """Predict log prices for ``tokens`` (B, T). Returns ``(predictions, cache)``."""
    cfg, P, bn = net.config, net.params, net.bn
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ShapeError(f"tokens must have shape (batch, {cfg.seq_len}), got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
    train = mode == "train"
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    p = cfg.dropout_rate
    use_dropout = train and p > 0
    if use_dropout and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    H = cfg.hidden_units
    T, B = cfg.seq_len, tokens.shape[0]

    cache = {"tokens": tokens, "layers": [], "fc": []}
    x = P["embedding"][tokens.T]
    if use_dropout:
        m = _dropout_mask(x.shape, p, rng)
        cache["emb_mask"] = m
        x = _apply_mask(x, m, p)
    for l in range(cfg.recurrent_layers):
        Wcat = np.concatenate([P[f"rec{l}.fwd.W"], P[f"rec{l}.bwd.W"]])
        A = (x.reshape(T * B, -1) @ Wcat.T).reshape(T, B, 2 * H)
        gamma, beta = P[f"rec{l}.gamma"], P[f"rec{l}.beta"]
        out = np.empty((T, B, 2 * H))
        layer = {"x": x, "Wcat": Wcat}
        for di, d in enumerate(DIRECTIONS):
            h = out[:, :, di * H:(di + 1) * H]
            xhat, inv = _scan(A[:, :, di * H:(di + 1) * H], P[f"rec{l}.{d}.U"], gamma, beta, mode,
                              bn.running_mean[l, di], bn.running_var[l, di], di == 1, bn.momentum, bn.eps, h)
            layer[d] = (h, xhat, inv)
        x = out
        if use_dropout:
            m = _dropout_mask(out.shape, p, rng)
            layer["mask"] = m
            x = _apply_mask(out, m, p)
        cache["layers"].append(layer)
    h = x.sum(axis=0)
    for k in range(cfg.fc_layers):
        W, b = P[f"fc{k}.W"], P[f"fc{k}.b"]
        a = h @ W.T + b
        entry = {"x": h}
        if k < cfg.fc_layers - 1:
            h = np.maximum(a, 0.0)
            entry["relu"] = a > 0
            if use_dropout:
                m = _dropout_mask(h.shape, p, rng)
                entry["mask"] = m
                h = _apply_mask(h, m, p)
        else:
            h = a
        cache["fc"].append(entry)
    return h[:, 0], cache


def predict(net: Network, tokens, chunk: int = 4096) -> np.ndarray:
    """Inference-mode predictions, evaluated in chunks to bound memory."""
    tokens = np.asarray(tokens)
    out = np.empty(tokens.shape[0])
    for s in range(0, tokens.shape[0], chunk):
        out[s:s + chunk] = forward(net, tokens[s:s + chunk], "infer")[0]
    return out


def mse_loss(predictions, targets) -> float:
    r = np.asarray(predictions) - np.asarray(targets)
    return float(np.mean(r * r))


# --------------------------------------------------------------- backward

def _scan_backward(dH, h, xhat, inv, U, gamma, reverse, dA):
    """Backprop through one direction, writing input gradients into ``dA``.

    Returns ``(dU, dgamma, dbeta)``.
    """
    T, B, H = dH.shape
    dgamma = np.zeros(H)
    dbeta = np.zeros(H)
    dprev = np.zeros((B, H))
    steps = range(T) if reverse else range(T - 1, -1, -1)
    first = True
    for t in steps:
        _kernels.bn_relu_backward(dH[t], dprev, not first, h[t], xhat[t], inv[t], gamma, dA[t], dgamma, dbeta)
        dprev = dA[t] @ U
        first = False
    dU = np.zeros((H, H))
    for t in range(T - 1):
        # step t+1 (forward) or t (backward) consumed the neighbouring hidden state
        if reverse:
            dU += dA[t].T @ h[t + 1]
        else:
            dU += dA[t + 1].T @ h[t]
    return dU, dgamma, dbeta


def backward(net: Network, cache, targets):
    """Gradients of the mean squared error for every parameter. Returns ``(loss, grads)``."""
    cfg, P = net.config, net.params
    H = cfg.hidden_units
    targets = np.asarray(targets, dtype=DTYPE)
    y = cache["fc"][-1]["x"] @ P[f"fc{cfg.fc_layers - 1}.W"].T + P[f"fc{cfg.fc_layers - 1}.b"]
    resid = y[:, 0] - targets
    n = resid.shape[0]
    loss = float(np.mean(resid * resid))
    grads = {}
    dh = (2.0 / n) * resid[:, None]
    for k in range(cfg.fc_layers - 1, -1, -1):
        entry = cache["fc"][k]
        if k < cfg.fc_layers - 1:
            if "mask" in entry:
                dh = _apply_mask(dh, entry["mask"], cfg.dropout_rate)
            dh = dh * entry["relu"]
        grads[f"fc{k}.W"] = dh.T @ entry["x"]
        grads[f"fc{k}.b"] = dh.sum(axis=0)
        dh = dh @ P[f"fc{k}.W"]
    T, B = cfg.seq_len, n
    dx = np.broadcast_to(dh, (T, B, 2 * H))
    for l in range(cfg.recurrent_layers - 1, -1, -1):
        layer = cache["layers"][l]
        if "mask" in layer:
            dx = _apply_mask(dx, layer["mask"], cfg.dropout_rate)
        dA = np.empty((T, B, 2 * H))
        dgamma = np.zeros(H)
        dbeta = np.zeros(H)
        for di, d in enumerate(DIRECTIONS):
            h, xhat, inv = layer[d]
            if xhat is None:
                raise ValueError("backward needs a train-mode forward cache")
            dU, dg, db = _scan_backward(dx[:, :, di * H:(di + 1) * H], h, xhat, inv,
                                        P[f"rec{l}.{d}.U"], P[f"rec{l}.gamma"], di == 1,
                                        dA[:, :, di * H:(di + 1) * H])
            grads[f"rec{l}.{d}.U"] = dU
            dgamma += dg
            dbeta += db
        grads[f"rec{l}.gamma"] = dgamma
        grads[f"rec{l}.beta"] = dbeta
        x = layer["x"]
        dA2 = dA.reshape(T * B, 2 * H)
        dWcat = dA2.T @ x.reshape(T * B, -1)
        grads[f"rec{l}.fwd.W"] = dWcat[:H]
        grads[f"rec{l}.bwd.W"] = dWcat[H:]
        dx = (dA2 @ layer["Wcat"]).reshape(T, B, -1)
    if "emb_mask" in cache:
        dx = _apply_mask(dx, cache["emb_mask"], cfg.dropout_rate)
    demb = np.zeros_like(P["embedding"])
    np.add.at(demb, cache["tokens"].T.reshape(-1), dx.reshape(T * B, -1))
    grads["embedding"] = demb
    return loss, {k: grads[k] for k in P}


# ---------------------------------------------------------- gradient check

def relu_pattern(cache) -> np.ndarray:
    """Flattened on/off state of every ReLU unit recorded in a forward cache."""
    parts = []
    for layer in cache["layers"]:
        for d in DIRECTIONS:
            parts.append((layer[d][0] > 0).ravel())
    parts += [e["relu"].ravel() for e in cache["fc"] if "relu" in e]
    return np.concatenate(parts) if parts else np.zeros(0, bool)


@dataclass
class GradCheck:
    name: str
    max_rel_error: float
    n_checked: int
    n_kinked: int


def gradient_check(net: Network, tokens, targets, h: float = 1e-5, dropout_seed: int = 0,
                   floor: float = 1e-6) -> list[GradCheck]:
    """Compare ``backward`` against central differences of the train-mode loss.

    The same dropout masks are drawn for every evaluation.  A coordinate whose
    two probes land on different sides of some ReLU kink has no meaningful
    central difference, so it is counted in ``n_kinked`` and skipped.
    """
    bn = copy.deepcopy(net.bn)

    def run():
        net.bn = copy.deepcopy(bn)
        y, cache = forward(net, tokens, "train", np.random.Generator(np.random.PCG64(dropout_seed)))
        return mse_loss(y, targets), relu_pattern(cache)

    _, base_cache = forward(net, tokens, "train", np.random.Generator(np.random.PCG64(dropout_seed)))
    _, grads = backward(net, base_cache, targets)
    out = []
    for name, value in net.params.items():
        flat = value.reshape(-1)
        num = np.zeros_like(flat)
        keep = np.ones(flat.size, bool)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, pp = run()
            flat[i] = orig - h
            lm, pm = run()
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(f"non-finite loss probing {name} coordinate {i}")
            keep[i] = np.array_equal(pp, pm)
            num[i] = (lp - lm) / (2 * h)
        a = grads[name].reshape(-1)[keep]
        n = num[keep]
        err = 0.0
        if a.size:
            err = float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
        out.append(GradCheck(name, err, int(keep.sum()), int((~keep).sum())))
    net.bn = bn
    return out


# ---------------------------------------------------------------- Adagrad

@dataclass
class AdagradState:
    accum: dict = field(default_factory=dict)
    learning_rate: float = 0.001
    eps: float = ADAGRAD_EPS

    @classmethod
    def for_params(cls, params: dict, learning_rate: float = 0.001) -> "AdagradState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, learning_rate)


def adagrad_step(params: dict, grads: dict, state: AdagradState) -> dict:
    """In-place Adagrad update of ``params``; returns ``params``."""
    updates = {}
    for name, g in grads.items():
        with np.errstate(invalid="ignore", over="ignore"):
            acc = state.accum[name] + g * g
            step = state.learning_rate * g / (np.sqrt(acc) + state.eps)
        if not np.all(np.isfinite(step)):
            raise NonFiniteError(f"non-finite Adagrad update for {name}")
        updates[name] = (acc, step)
    for name, (acc, step) in updates.items():
        state.accum[name] = acc
        params[name] -= step
    return params


# ------------------------------------------------------------- checkpoint

MAGIC = b"PLATERNN"
FORMAT_VERSION = (1, 0, 0)


class CheckpointError(ValueError):
    pass


def save_params(net: Network, path) -> None:
    """Versioned little-endian binary: magic, version, JSON header, float64 tensors."""
    tensors = [(k, v) for k, v in net.params.items()]
    tensors.append(("bn.running_mean", net.bn.running_mean))
    tensors.append(("bn.running_var", net.bn.running_var))
    header = {
        "config": asdict(net.config),
        "bn": {"momentum": net.bn.momentum, "eps": net.bn.eps},
        "tensors": [[k, list(v.shape)] for k, v in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3HI", *FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_params(path, expected: ModelConfig | None = None) -> Network:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic); expected format {_ver(FORMAT_VERSION)}")
    off = len(MAGIC)
    if len(data) < off + 10:
        raise CheckpointError(f"{path}: truncated header")
    *version, hlen = struct.unpack_from("<3HI", data, off)
    off += 10
    if version[0] != FORMAT_VERSION[0]:
        raise CheckpointError(f"{path}: format {_ver(version)} unsupported, expected {_ver(FORMAT_VERSION)}")
    if len(data) < off + hlen:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    config = ModelConfig(**header["config"])
    if expected is not None and param_shapes(expected) != param_shapes(config):
        raise ShapeError(f"{path}: checkpoint config {config.label} does not match {expected.label}")
    arrays = {}
    for name, shape in header["tensors"]:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < off + nbytes:
            raise CheckpointError(f"{path}: truncated at tensor {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(DTYPE)
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    shapes = param_shapes(config)
    for name, shape in shapes.items():
        if name not in arrays or arrays[name].shape != tuple(shape):
            raise ShapeError(f"{path}: tensor {name} missing or misshapen")
    bn = BatchNormState(arrays.pop("bn.running_mean"), arrays.pop("bn.running_var"), **header["bn"])
    return Network(config, {k: arrays[k] for k in shapes}, bn)


def _ver(v) -> str:
    return ".".join(str(x) for x in v)
