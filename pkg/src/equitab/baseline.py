"""Fixed-output-width baseline and its mitigation machinery.

The baseline embeds each row as ``U x + V y`` with ``V`` a full d x q_max
matrix, runs row attention where every row attends to the training rows, and
decodes test tokens with a one-hidden-layer MLP emitting q_max logits.  It is
not equivariant in the class slots.  ``ensemble_forward`` averages it over
random slot permutations; ``ecoc_forward`` handles more than q_max classes by
partitioning the classes into at most q_max groups several times and
combining group log-probabilities.
"""

import math
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from . import tensor as T
from .errors import CapacityError, CodebookError
from .model import _Model, _uniform, attend_datapoints, init_block, pad_covariates, to_tensors
from .prior import EpisodeBatch, PermutationSpec, as_batch, permute_batch
from .tensor import Tensor


def init_baseline_params(config, seed=0, dtype=np.float32):
    config.validate()
    rng = np.random.default_rng(seed)
    d = config.d
    params = {
        "U": _uniform(rng, config.p_max, (d, config.p_max)),
        "V": _uniform(rng, config.q_max, (d, config.q_max)),
    }
    for i in range(config.n_layers):
        init_block(params, f"layers.{i}", rng, d, config.hidden)
    params["decoder.w1"] = _uniform(rng, d, (d, config.hidden))
    params["decoder.b1"] = np.zeros(config.hidden)
    params["decoder.w2"] = _uniform(rng, config.hidden, (config.hidden, config.q_max))
    params["decoder.b2"] = np.zeros(config.q_max)
    return to_tensors(params, dtype)


def baseline_logits(batch, params, config):
    batch = as_batch(batch)
    N, M, p, q = batch.dims
    if q > config.q_max:
        raise CapacityError(f"episode has q={q} classes, baseline supports q_max={config.q_max}; "
                            "use ecoc_forward")
    dtype = params["U"].dtype
    B, d = batch.B, config.d
    xs = pad_covariates(np.concatenate([batch.X, batch.Xstar], axis=1), config.p_max, dtype)
    ypad = np.zeros((B, N + M, config.q_max), dtype=dtype)
    ypad[:, :N, :q] = batch.Y
    E = Tensor(xs) @ params["U"].transpose() + Tensor(ypad) @ params["V"].transpose()
    E = E.reshape(B, N + M, 1, d)
    for i in range(config.n_layers):
        E = attend_datapoints(E, params, f"layers.{i}", config.n_heads, N)
    test = E[:, N:, 0]
    h = T.gelu(test @ params["decoder.w1"] + params["decoder.b1"])
    logits = h @ params["decoder.w2"] + params["decoder.b2"]
    return logits[..., :q]


class BaselineModel(_Model):
    kind = "baseline"

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        return cls(config, init_baseline_params(config, seed, dtype))

    def logits(self, batch):
        return baseline_logits(batch, self.params, self.config)


def baseline_forward(batch, model):
    return model.predict_proba(batch)


# ---------------------------------------------------------------------------
# permutation ensembling
# ---------------------------------------------------------------------------


def all_permutations(q):
    return [PermutationSpec.from_sigma(s) for s in permutations(range(q))]


def sample_permutations(q, n, seed):
    rng = np.random.default_rng(seed)
    return [PermutationSpec.random(q, rng) for _ in range(n)]


def average_over_permutations(predictor, batch, perms):
    """Mean of sigma^-1(predictor(sigma(Y))) over ``perms``, summed in list order."""
    batch = as_batch(batch)
    total = None
    for perm in perms:
        pred = perm.unapply(predictor(permute_batch(batch, perm)))
        total = pred if total is None else total + pred
    return total / len(perms)


def ensemble_forward(batch, predictor, n_ens, seed=0, perms=None):
    """Average of ``n_ens`` class-slot-permuted predictions; deterministic in ``seed``."""
    if n_ens < 1:
        raise ValueError("n_ens must be at least 1")
    batch = as_batch(batch)
    if perms is None:
        perms = sample_permutations(batch.dims[3], n_ens, seed)
    return average_over_permutations(predictor, batch, perms)


# ---------------------------------------------------------------------------
# ECOC
# ---------------------------------------------------------------------------


@dataclass
class CodeBook:
    K: int
    q_max: int
    partitions: list  # each an int array mapping class -> group

    def codes(self):
        return np.stack(self.partitions, axis=1) if self.partitions else np.zeros((self.K, 0), int)

    def covers(self):
        """True when every pair of distinct classes is separated by some partition."""
        return len({tuple(row) for row in self.codes().tolist()}) == self.K

    def uncovered_pairs(self):
        codes = self.codes()
        return [(a, b) for a in range(self.K) for b in range(a + 1, self.K)
                if (codes[a] == codes[b]).all()]

    @property
    def is_identity(self):
        return len(self.partitions) == 1 and np.array_equal(self.partitions[0], np.arange(self.K))


def _covers(partitions, K):
    codes = np.stack(partitions, axis=1)
    return len({tuple(row) for row in codes.tolist()}) == K


def build_codebook(K, q_max, seed=0, max_draws=10_000):
    """Random balanced partitions until all pairs are covered, then drop redundant ones."""
    if K < 2 or q_max < 2:
        raise CodebookError(f"need K >= 2 and q_max >= 2, got K={K}, q_max={q_max}")
    if K <= q_max:
        return CodeBook(K, q_max, [np.arange(K)])
    rng = np.random.default_rng(seed)
    partitions = []
    for _ in range(max_draws):
        partitions.append(rng.permutation(K) % q_max)
        if _covers(partitions, K):
            break
    else:
        raise CodebookError(f"no covering codebook for K={K}, q_max={q_max} after {max_draws} draws")
    i = 0
    while i < len(partitions):
        rest = partitions[:i] + partitions[i + 1:]
        if rest and _covers(rest, K):
            partitions = rest
        else:
            i += 1
    return CodeBook(K, q_max, partitions)


def ecoc_predict(predictor, batch, codebook):
    """Combine per-partition group probabilities into K-class probabilities.

    score(k) = sum_r log p_r(group_r(k)); the result is softmax(score).
    """
    batch = as_batch(batch)
    K = batch.dims[3]
    if codebook.K != K:
        raise CodebookError(f"codebook built for K={codebook.K}, batch has {K} classes")
    if not codebook.covers():
        raise CodebookError(f"codebook leaves class pairs unseparated: {codebook.uncovered_pairs()[:5]}")
    if codebook.is_identity:
        return predictor(batch)
    scores = 0.0
    for groups in codebook.partitions:
        width = int(groups.max()) + 1
        assign = np.zeros((K, width))
        assign[np.arange(K), groups] = 1
        sub = EpisodeBatch(batch.X, batch.Y @ assign, batch.Xstar, batch.Ystar @ assign)
        probs = predictor(sub)
        with np.errstate(divide="ignore"):
            scores = scores + np.log(probs)[..., groups]
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def ecoc_forward(batch, model, codebook, n_ens=1, seed=0):
    """ECOC over the baseline; each sub-task optionally permutation-ensembled."""
    if n_ens > 1:
        def predictor(b):
            return ensemble_forward(b, model, n_ens, seed)
    else:
        predictor = model
    return ecoc_predict(predictor, batch, codebook)


def baseline_predictor(model, n_ens=1, seed=0):
    """Callable batch -> probabilities that routes q > q_max through ECOC."""

    def predict(batch):
        batch = as_batch(batch)
        q = batch.dims[3]
        if q > model.config.q_max:
            return ecoc_forward(batch, model, build_codebook(q, model.config.q_max, seed), n_ens, seed)
        if n_ens > 1:
            return ensemble_forward(batch, model, n_ens, seed)
        return model(batch)

    return predict


def expected_codebook_size(K, q_max):
    """Lower bound on partitions needed for coverage: ceil(log_{q_max} K)."""
    return max(1, math.ceil(math.log(K) / math.log(q_max) - 1e-12))
