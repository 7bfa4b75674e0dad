"""Target-equivariant in-context classifier.

Token grid layout: ``E[b, n, 0]`` is the covariate token of row n and
``E[b, n, 1 + j]`` the token of class slot j.  Training rows carry
``y[j] * V`` in their class slots; test rows carry the shared prediction
token ``W_pred``.  The backbone alternates attention across the q + 1 slots of
each row with attention across rows for each slot, component attention first.
The decoder averages training targets with weights given by a softmax over
grid-embedding similarities, then adds a scalar MLP correction per class slot.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigurationError, EmptyContextError
from .prior import as_batch
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 6
    n_heads: int = 4
    hidden: int = 128
    p_max: int = 16
    decoder_hidden: int = 32
    q_max: int = 5  # baseline output width; the equivariant model ignores it

    def validate(self):
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 2 or self.n_layers % 2:
            raise ConfigurationError(f"n_layers must be a positive even number, got {self.n_layers}")
        return self

    def as_dict(self):
        return asdict(self)


def _uniform(rng, fan_in, shape):
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_block(params, prefix, rng, d, hidden):
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = _uniform(rng, d, (d, d))
        params[f"{prefix}.b{name[1]}"] = np.zeros(d)
    params[f"{prefix}.ln1.gain"] = np.ones(d)
    params[f"{prefix}.ln1.bias"] = np.zeros(d)
    params[f"{prefix}.mlp.w1"] = _uniform(rng, d, (d, hidden))
    params[f"{prefix}.mlp.b1"] = np.zeros(hidden)
    params[f"{prefix}.mlp.w2"] = _uniform(rng, hidden, (hidden, d))
    params[f"{prefix}.mlp.b2"] = np.zeros(d)
    params[f"{prefix}.ln2.gain"] = np.ones(d)
    params[f"{prefix}.ln2.bias"] = np.zeros(d)


def to_tensors(arrays, dtype):
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in arrays.items()}


def init_equitab_params(config, seed=0, dtype=np.float32):
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d
    params = {
        "U": _uniform(rng, config.p_max, (d, config.p_max)),
        "V": rng.normal(0, 0.02, size=d),
        "W_pred": rng.normal(0, 0.02, size=d),
    }
    for i in range(config.n_layers):
        init_block(params, f"layers.{i}", rng, d, config.hidden)
    h = config.decoder_hidden
    params["decoder.w1"] = _uniform(rng, 1, (1, h))
    params["decoder.b1"] = np.zeros(h)
    params["decoder.w2"] = _uniform(rng, h, (h, 1))
    params["decoder.b2"] = np.zeros(1)
    return to_tensors(params, dtype)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def pad_covariates(X, p_max, dtype):
    """Zero-pad the feature axis to p_max and rescale by p_max / p."""
    p = X.shape[-1]
    if p > p_max:
        raise CapacityError(f"episode has p={p} covariates, model supports p_max={p_max}")
    out = np.zeros(X.shape[:-1] + (p_max,), dtype=dtype)
    out[..., :p] = X * (p_max / p)
    return out


def self_attention(x, params, prefix, n_heads, mask=None, key_rows=None):
    """Multi-head attention over axis 1 of ``x`` (G, L, d), returned before the residual.

    ``key_rows`` restricts keys and values to the first rows, which is the
    datapoint mask (every row attends to training rows only) expressed by
    slicing.  ``mask`` is a boolean (L, L) matrix for other patterns.
    """
    G, L, d = x.shape
    dh = d // n_heads

    def heads(t, rows):
        return t.reshape(G, rows, n_heads, dh).transpose(0, 2, 1, 3)

    src = x if key_rows is None else x[:, :key_rows]
    Lk = src.shape[1]
    q = heads(x @ params[prefix + ".wq"] + params[prefix + ".bq"], L)
    k = heads(src @ params[prefix + ".wk"] + params[prefix + ".bk"], Lk)
    v = heads(src @ params[prefix + ".wv"] + params[prefix + ".bv"], Lk)
    scores = (q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    weights = T.softmax_masked(scores, mask)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(G, L, d)
    return out @ params[prefix + ".wo"] + params[prefix + ".bo"]


def residual_block(x, attended, params, prefix):
    """LN(x + attention), then LN(x + MLP(x))."""
    x = T.layer_norm(x + attended, params[prefix + ".ln1.gain"], params[prefix + ".ln1.bias"])
    h = T.gelu(x @ params[prefix + ".mlp.w1"] + params[prefix + ".mlp.b1"])
    h = h @ params[prefix + ".mlp.w2"] + params[prefix + ".mlp.b2"]
    return T.layer_norm(x + h, params[prefix + ".ln2.gain"], params[prefix + ".ln2.bias"])


def component_mask(n_slots):
    """Covariate slot attends to every slot; class slots attend to the covariate slot only."""
    mask = np.zeros((n_slots, n_slots), dtype=bool)
    mask[0, :] = True
    mask[:, 0] = True
    return mask


def attend_components(E, params, prefix, n_heads):
    B, L, S, d = E.shape
    x = E.reshape(B * L, S, d)
    att = self_attention(x, params, prefix, n_heads, mask=component_mask(S))
    return residual_block(x, att, params, prefix).reshape(B, L, S, d)


def attend_datapoints(E, params, prefix, n_heads, n_train):
    B, L, S, d = E.shape
    if n_train < 1:
        raise EmptyContextError("datapoint attention needs at least one training row")
    x = E.transpose(0, 2, 1, 3).reshape(B * S, L, d)
    att = self_attention(x, params, prefix, n_heads, key_rows=n_train)
    x = residual_block(x, att, params, prefix)
    return x.reshape(B, S, L, d).transpose(0, 2, 1, 3)


# ---------------------------------------------------------------------------
# encoder / backbone / decoder
# ---------------------------------------------------------------------------


def encode(batch, params, config):
    batch = as_batch(batch)
    U = params["U"]
    dtype = U.dtype
    B = batch.B
    N, M, p, q = batch.dims
    xs = pad_covariates(np.concatenate([batch.X, batch.Xstar], axis=1), config.p_max, dtype)
    cov = Tensor(xs) @ U.transpose()  # (B, L, d)
    targets = Tensor(np.asarray(batch.Y, dtype=dtype)[..., None]) * params["V"]  # (B, N, q, d)
    guess = T.broadcast_to(params["W_pred"], (B, M, q, config.d))
    slots = T.concatenate([targets, guess], axis=1)
    return T.concatenate([cov.reshape(B, N + M, 1, config.d), slots], axis=2)


def backbone(E, params, config, n_train):
    for i in range(0, config.n_layers, 2):
        E = attend_components(E, params, f"layers.{i}", config.n_heads)
        E = attend_datapoints(E, params, f"layers.{i + 1}", config.n_heads, n_train)
    return E


def attention_readout(E, Y, n_train):
    """Weighted average of training targets, weights from grid-embedding similarity."""
    B, L, S, d = E.shape
    flat = E.reshape(B, L, S * d)
    train, test = flat[:, :n_train], flat[:, n_train:]
    sim = (test @ T.swapaxes(train, -1, -2)) * (1.0 / math.sqrt(S * d))
    weights = T.softmax(sim)
    return weights @ Tensor(np.asarray(Y, dtype=E.dtype))


def pointwise_correction(y_tilde, params):
    """Shared scalar-to-scalar MLP applied to each class slot independently."""
    B, M, q = y_tilde.shape
    h = T.gelu(y_tilde.reshape(B, M, q, 1) @ params["decoder.w1"] + params["decoder.b1"])
    return (h @ params["decoder.w2"] + params["decoder.b2"]).reshape(B, M, q)


def decode(E, Y, params, n_train):
    y_tilde = attention_readout(E, Y, n_train)
    return y_tilde + pointwise_correction(y_tilde, params)


def equitab_logits(batch, params, config):
    batch = as_batch(batch)
    n_train = batch.dims[0]
    E = backbone(encode(batch, params, config), params, config, n_train)
    return decode(E, batch.Y, params, n_train)


def cast_params(params, dtype):
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


class _Model:
    kind = None

    def __init__(self, config, params):
        self.config = config.validate()
        self.params = params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def logits(self, batch):
        raise NotImplementedError

    def predict_proba(self, batch):
        """Class-probability rows (B, M, q) without recording a tape."""
        with T.no_grad():
            return T.softmax(self.logits(batch)).data

    def __call__(self, batch):
        return self.predict_proba(batch)

    def astype(self, dtype):
        return type(self)(self.config, cast_params(self.params, dtype))

    def n_parameters(self):
        return sum(p.size for p in self.params.values())


class EquiTabModel(_Model):
    kind = "equitab"

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        return cls(config, init_equitab_params(config, seed, dtype))

    def logits(self, batch):
        return equitab_logits(batch, self.params, self.config)


def forward(batch, model):
    """Per-test-point class probabilities, shape (B, M, q)."""
    return model.predict_proba(batch)
