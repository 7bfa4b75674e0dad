"""Synthetic classification episodes, CSV ingestion, and class-slot permutations.

Two generator families are provided:

``blobs``
    Gaussian clusters.  Cluster means are uniform in [-3, 3]^p and share an
    isotropic noise scale chosen so that the closest pair of means sits
    ``separation`` noise standard deviations apart.
``random-mlp``
    Covariates uniform on [-1, 1]^p; the label is the argmax of a random
    two-layer network's logits perturbed by Gumbel noise scaled by
    ``temperature``.

After generation the cluster/class identities are composed with a uniform
random permutation, so every relabelling of an episode is equally likely.
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, IngestionError, PermutationError

FAMILIES = ("blobs", "random-mlp")
MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class PriorConfig:
    n_range: tuple = (32, 224)
    total: int = 256  # N + M
    p_range: tuple = (2, 8)
    q_range: tuple = (2, 5)
    family: str = "blobs"
    separation: float = 3.0
    hidden: int = 16
    temperature: float = 0.1
    seed: int = 0

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown prior family {self.family!r}; expected one of {FAMILIES}")
        for name in ("n_range", "p_range", "q_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} is empty: {lo} > {hi}")
        n_lo, n_hi = self.n_range
        q_lo, q_hi = self.q_range
        if q_lo < 2:
            raise ConfigurationError("q must be at least 2")
        if self.p_range[0] < 1:
            raise ConfigurationError("p must be at least 1")
        if n_hi < q_lo:
            raise ConfigurationError(f"no feasible N >= q: N <= {n_hi} but q >= {q_lo}")
        if n_lo >= self.total:
            raise ConfigurationError(f"N range {self.n_range} leaves no test rows out of {self.total}")
        if self.separation <= 0:
            raise ConfigurationError("separation must be positive")
        return self


@dataclass
class Episode:
    X: np.ndarray
    Y: np.ndarray
    Xstar: np.ndarray
    Ystar: np.ndarray
    # class relabelling applied after generation: label = label_perm[raw cluster]
    label_perm: np.ndarray = field(default=None, repr=False)

    @property
    def N(self):
        return self.X.shape[0]

    @property
    def M(self):
        return self.Xstar.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    p = n_features

    @property
    def n_classes(self):
        return self.Y.shape[1]

    q = n_classes

    @property
    def dims(self):
        return self.N, self.M, self.p, self.q

    @property
    def labels(self):
        return self.Y.argmax(axis=1)

    @property
    def test_labels(self):
        return self.Ystar.argmax(axis=1)

    def validate(self):
        for name in ("Y", "Ystar"):
            t = getattr(self, name)
            if not (np.isin(t, (0, 1)).all() and (t.sum(axis=1) == 1).all()):
                raise ConfigurationError(f"{name} rows must be one-hot")
        if not (self.Y.sum(axis=0) > 0).all():
            raise ConfigurationError("every class must appear in the training targets")
        if self.N < self.q or self.M < 1 or self.p < 1 or self.q < 2:
            raise ConfigurationError(f"invalid episode dims {self.dims}")
        return self

    def astype(self, dtype):
        return replace(self, X=self.X.astype(dtype), Y=self.Y.astype(dtype),
                       Xstar=self.Xstar.astype(dtype), Ystar=self.Ystar.astype(dtype))

    def drop_test_rows(self, rows):
        keep = np.setdiff1d(np.arange(self.M), rows)
        return replace(self, Xstar=self.Xstar[keep], Ystar=self.Ystar[keep])

    def shuffle_train_rows(self, order):
        return replace(self, X=self.X[order], Y=self.Y[order])


@dataclass
class EpisodeBatch:
    """Episodes stacked along a leading batch axis; all share (N, M, p, q)."""

    X: np.ndarray  # (B, N, p)
    Y: np.ndarray  # (B, N, q)
    Xstar: np.ndarray  # (B, M, p)
    Ystar: np.ndarray  # (B, M, q)

    @classmethod
    def from_episodes(cls, episodes):
        dims = {e.dims for e in episodes}
        if len(dims) != 1:
            raise ConfigurationError(f"episodes in a batch must share dims, got {sorted(dims)}")
        return cls(np.stack([e.X for e in episodes]), np.stack([e.Y for e in episodes]),
                   np.stack([e.Xstar for e in episodes]), np.stack([e.Ystar for e in episodes]))

    @property
    def B(self):
        return self.X.shape[0]

    @property
    def dims(self):
        return self.X.shape[1], self.Xstar.shape[1], self.X.shape[2], self.Y.shape[2]

    def episodes(self):
        return [Episode(self.X[b], self.Y[b], self.Xstar[b], self.Ystar[b]) for b in range(self.B)]

    def __len__(self):
        return self.B


def as_batch(data):
    if isinstance(data, EpisodeBatch):
        return data
    if isinstance(data, Episode):
        return EpisodeBatch.from_episodes([data])
    return EpisodeBatch.from_episodes(list(data))


# ---------------------------------------------------------------------------
# permutations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PermutationSpec:
    """A permutation of q class slots, 0-based: ``apply(y)[j] = y[sigma[j]]``."""

    sigma: tuple
    sigma_inverse: tuple

    @classmethod
    def from_sigma(cls, sigma):
        sigma = np.asarray(sigma, dtype=int)
        if sorted(sigma.tolist()) != list(range(len(sigma))):
            raise PermutationError(f"not a permutation: {sigma.tolist()}")
        return cls(tuple(sigma.tolist()), tuple(np.argsort(sigma).tolist()))

    @classmethod
    def from_one_based(cls, sigma):
        return cls.from_sigma(np.asarray(sigma) - 1)

    @classmethod
    def identity(cls, q):
        return cls.from_sigma(np.arange(q))

    @classmethod
    def random(cls, q, rng):
        return cls.from_sigma(rng.permutation(q))

    @property
    def q(self):
        return len(self.sigma)

    def inverse(self):
        return PermutationSpec(self.sigma_inverse, self.sigma)

    def apply(self, rows):
        """Reindex the last axis: out[..., j] = rows[..., sigma[j]]."""
        rows = np.asarray(rows)
        if rows.shape[-1] != self.q:
            raise PermutationError(f"permutation over {self.q} slots applied to width {rows.shape[-1]}")
        return rows[..., list(self.sigma)]

    def unapply(self, rows):
        """Apply the inverse permutation (undo ``apply``)."""
        rows = np.asarray(rows)
        if rows.shape[-1] != self.q:
            raise PermutationError(f"permutation over {self.q} slots applied to width {rows.shape[-1]}")
        return rows[..., list(self.sigma_inverse)]

    def relabel(self, labels):
        """Map integer class labels the same way ``apply`` maps one-hot rows."""
        return np.asarray(self.sigma_inverse)[labels]


def permute_targets(episode, perm):
    if perm.q != episode.q:
        raise PermutationError(f"permutation over {perm.q} classes, episode has {episode.q}")
    return replace(episode, Y=perm.apply(episode.Y), Ystar=perm.apply(episode.Ystar))


def permute_batch(batch, perm):
    if perm.q != batch.dims[3]:
        raise PermutationError(f"permutation over {perm.q} classes, batch has {batch.dims[3]}")
    return replace(batch, Y=perm.apply(batch.Y), Ystar=perm.apply(batch.Ystar))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def one_hot(labels, q, dtype=np.float64):
    out = np.zeros((len(labels), q), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def zscore(train, test):
    """Standardise columns with train-split statistics; constant columns map to 0."""
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    train = np.where(sd > 0, (train - mu) / safe, 0.0)
    test = np.where(sd > 0, (test - mu) / safe, 0.0)
    return train, test


def sample_dims(config, rng):
    config.validate()
    q = int(rng.integers(config.q_range[0], config.q_range[1] + 1))
    p = int(rng.integers(config.p_range[0], config.p_range[1] + 1))
    n_lo = max(config.n_range[0], q)
    n_hi = min(config.n_range[1], config.total - 1)
    if n_lo > n_hi:
        raise ConfigurationError(f"no N in {config.n_range} satisfies q={q} <= N < {config.total}")
    n = int(rng.integers(n_lo, n_hi + 1))
    return n, config.total - n, p, q


def _blobs(config, rng, total, p, q):
    means = rng.uniform(-3, 3, size=(q, p))
    diffs = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    closest = dist[~np.eye(q, dtype=bool)].min()
    scale = closest / config.separation
    raw = rng.integers(0, q, size=total)
    X = means[raw] + scale * rng.standard_normal((total, p))
    return X, raw


def _random_mlp(config, rng, total, p, q):
    W1 = rng.standard_normal((p, config.hidden)) / math.sqrt(p)
    b1 = rng.standard_normal(config.hidden)
    W2 = rng.standard_normal((config.hidden, q)) / math.sqrt(config.hidden)
    X = rng.uniform(-1, 1, size=(total, p))
    logits = np.tanh(X @ W1 + b1) @ W2
    raw = (logits + config.temperature * rng.gumbel(size=logits.shape)).argmax(axis=1)
    return X, raw


def sample_episode(config, seed, dims=None):
    """Draw one episode, deterministic in (config, seed, dims).

    When ``dims`` = (N, M, p, q) is omitted it is drawn from the config ranges
    by a separate generator on the same seed, exactly as ``sample_batch`` does,
    so a singleton batch reproduces this episode.
    """
    config.validate()
    if dims is None:
        dims = sample_dims(config, np.random.default_rng(seed))
    rng = np.random.default_rng(seed)
    n, m, p, q = dims
    if n < q or m < 1 or p < 1 or q < 2:
        raise ConfigurationError(f"infeasible episode dims N={n} M={m} p={p} q={q}")
    generate = _blobs if config.family == "blobs" else _random_mlp
    for _ in range(MAX_REJECTIONS):
        X, raw = generate(config, rng, n + m, p, q)
        if len(np.unique(raw[:n])) == q:
            break
    else:
        raise ConfigurationError(f"could not place all {q} classes in {n} training rows")
    perm = rng.permutation(q)
    labels = perm[raw]
    Xtr, Xte = zscore(X[:n], X[n:])
    return Episode(Xtr, one_hot(labels[:n], q), Xte, one_hot(labels[n:], q), label_perm=perm)


def sample_batch(config, batch_size, seed):
    """``batch_size`` episodes sharing dims drawn once from ``seed``; episode i uses seed + i."""
    if batch_size < 1:
        raise ConfigurationError("batch size must be at least 1")
    dims = sample_dims(config, np.random.default_rng(seed))
    episodes = [sample_episode(config, seed + i, dims) for i in range(batch_size)]
    return EpisodeBatch.from_episodes(episodes)


# ---------------------------------------------------------------------------
# ingestion and dumps
# ---------------------------------------------------------------------------


def _parse_float(cell):
    cell = cell.strip()
    if cell == "":
        return math.nan
    return float(cell)


def load_csv(path, label_column, split_fraction=0.5, seed=0):
    """Read a headed CSV into an episode with a seeded random train/test split.

    Covariates are z-scored and mean-imputed with train-split statistics;
    labels are one-hot encoded in order of first appearance in the file.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise IngestionError(f"{path} is empty")
    header, body = [h.strip() for h in rows[0]], [r for r in rows[1:] if r]
    if label_column not in header:
        raise IngestionError(f"label column {label_column!r} not in header {header}")
    li = header.index(label_column)
    if any(len(r) != len(header) for r in body):
        raise IngestionError(f"{path}: ragged rows")
    labels_raw = [r[li].strip() for r in body]
    if any(lbl == "" for lbl in labels_raw):
        raise IngestionError(f"{path}: missing label")
    classes = list(dict.fromkeys(labels_raw))
    labels = np.array([classes.index(lbl) for lbl in labels_raw])
    try:
        X = np.array([[_parse_float(c) for j, c in enumerate(r) if j != li] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise IngestionError(f"{path}: non-numeric covariate: {exc}") from exc
    if X.ndim != 2 or X.shape[1] == 0:
        raise IngestionError(f"{path}: no covariate columns")

    n_total = len(body)
    n_train = int(round(split_fraction * n_total))
    if not 1 <= n_train < n_total:
        raise IngestionError(f"split {split_fraction} of {n_total} rows leaves an empty side")
    order = np.random.default_rng(seed).permutation(n_total)
    tr, te = order[:n_train], order[n_train:]

    present = np.unique(labels[tr])
    if len(present) < 2:
        raise IngestionError("fewer than two classes in the training split")
    missing = np.setdiff1d(np.unique(labels[te]), present)
    if len(missing):
        names = [classes[i] for i in missing]
        raise IngestionError(f"classes {names} appear only in the test split")
    q = len(classes)

    Xtr, Xte = X[tr], X[te]
    col_mean = np.nanmean(np.where(np.isnan(Xtr).all(axis=0), 0.0, Xtr), axis=0) if len(Xtr) else 0
    Xtr = np.where(np.isnan(Xtr), col_mean, Xtr)
    Xte = np.where(np.isnan(Xte), col_mean, Xte)
    Xtr, Xte = zscore(Xtr, Xte)
    return Episode(Xtr, one_hot(labels[tr], q), Xte, one_hot(labels[te], q))


def dump_episode(episode, path):
    """Write the debug text format: "N M p q" then X, Y, Xstar, Ystar row-major."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("%d %d %d %d\n" % episode.dims)
        for arr in (episode.X, episode.Y, episode.Xstar, episode.Ystar):
            for row in arr:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_episode_dump(path):
    with open(path, encoding="utf-8") as fh:
        n, m, p, q = (int(v) for v in fh.readline().split())
        values = np.array(fh.read().split(), dtype=np.float64)
    sizes = [n * p, n * q, m * p, m * q]
    if values.size != sum(sizes):
        raise IngestionError(f"{path}: expected {sum(sizes)} values, found {values.size}")
    parts = np.split(values, np.cumsum(sizes)[:-1])
    return Episode(parts[0].reshape(n, p), parts[1].reshape(n, q),
                   parts[2].reshape(m, p), parts[3].reshape(m, q))
