"""Experiment routines behind the command-line entry point.

Each routine returns plain rows; ``cli`` owns file emission and manifests.
"""

import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .baseline import BaselineModel, baseline_predictor
from .errors import CapacityError, ConfigurationError
from .lab import ensemble_sweep, gap_estimate, sq_identity_check, violation_rate
from .model import EquiTabModel, ModelConfig
from .prior import Episode, EpisodeBatch, PermutationSpec, PriorConfig, load_csv, sample_episode
from .trainer import load_checkpoint, model_from_checkpoint

# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


def load_model(source, dtype=np.float32, init_seed=0, model_config=None):
    """A checkpoint path, or ``equitab``/``baseline`` for a randomly initialised model."""
    if source in ("equitab", "baseline"):
        cls = EquiTabModel if source == "equitab" else BaselineModel
        return cls.initialize(model_config or ModelConfig(), init_seed, dtype)
    return model_from_checkpoint(load_checkpoint(source), dtype)


def predictor_for(model, n_ens=1, seed=0):
    """Batch -> probabilities; the baseline goes through ECOC when q > q_max."""
    if model.kind == "baseline":
        return baseline_predictor(model, n_ens, seed)
    return model


# ---------------------------------------------------------------------------
# KNN reference
# ---------------------------------------------------------------------------


def knn_predict(episode, k=5):
    """Class frequencies among the k Euclidean nearest training rows.

    Distance ties are broken by training-row index (stable sort).
    """
    N = episode.N
    if not 1 <= k <= N:
        raise ConfigurationError(f"k must lie in [1, N={N}], got {k}")
    d2 = ((episode.Xstar[:, None, :] - episode.X[None, :, :]) ** 2).sum(-1)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return episode.Y[nearest].mean(axis=1)


def knn_predictor(k=5):
    def predict(batch):
        return np.stack([knn_predict(ep, min(k, ep.N)) for ep in batch.episodes()])

    return predict


def accuracy(probs, episode):
    return float((np.asarray(probs).argmax(-1) == episode.test_labels).mean())


def majority_accuracy(episode):
    counts = episode.Y.sum(axis=0)
    return float((episode.test_labels == int(np.argmax(counts))).mean())


# ---------------------------------------------------------------------------
# grid experiment
# ---------------------------------------------------------------------------


def grid_training_episode(resolution=40, dtype=np.float64):
    """Nine training points on a 3x3 lattice in [-1, 1]^2, one class each; test points on a dense grid."""
    axis = np.array([-1.0, 0.0, 1.0])
    X = np.array([(a, b) for a in axis for b in axis])
    Y = np.eye(9)
    if resolution == 1:
        g = np.zeros((1, 2))
    else:
        lin = np.linspace(-1, 1, resolution)
        g = np.array([(a, b) for a in lin for b in lin])
    Ystar = np.zeros((len(g), 9))
    Ystar[:, 0] = 1  # unused placeholder targets
    return Episode(X.astype(dtype), Y.astype(dtype), g.astype(dtype), Ystar.astype(dtype))


@dataclass
class GridResult:
    resolution: int
    orderings: list  # PermutationSpec per ordering
    rows: list  # (ordering_id, x1, x2, pred_class) in original class labels
    train_points: list  # (x1, x2, class)

    def class_maps(self):
        n = len(self.orderings)
        preds = np.array([r[3] for r in self.rows]).reshape(n, -1)
        return preds

    def consistent_fraction(self):
        maps = self.class_maps()
        return float((maps == maps[0]).all(axis=0).mean())


def run_grid(predictor, resolution=40, n_orderings=3, seed=0):
    episode = grid_training_episode(resolution)
    rng = np.random.default_rng(seed)
    orderings = [PermutationSpec.random(9, rng) for _ in range(n_orderings)]
    rows = []
    for oid, perm in enumerate(orderings):
        permuted = replace(episode, Y=perm.apply(episode.Y), Ystar=perm.apply(episode.Ystar))
        probs = np.asarray(predictor(EpisodeBatch.from_episodes([permuted])))[0]
        pred = perm.unapply(probs).argmax(-1)
        for (x1, x2), c in zip(episode.Xstar, pred):
            rows.append((oid, float(x1), float(x2), int(c)))
    train_points = [(float(x[0]), float(x[1]), int(c)) for x, c in zip(episode.X, episode.labels)]
    return GridResult(resolution, orderings, rows, train_points)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@dataclass
class Task:
    name: str
    episode: Episode


def build_suite(prior, n_seen, n_unseen, unseen_q, seed, csv_tasks=()):
    """Materialise the task list once; every model is scored on these exact episodes."""
    tasks = []
    for i in range(n_seen):
        tasks.append(Task(f"seen-{i:03d}", sample_episode(prior, _task_seed(seed, 1, i))))
    unseen = replace(prior, q_range=(unseen_q, unseen_q))
    for i in range(n_unseen):
        tasks.append(Task(f"unseen-q{unseen_q}-{i:03d}", sample_episode(unseen, _task_seed(seed, 2, i))))
    for path, label in csv_tasks:
        name = os.path.splitext(os.path.basename(path))[0]
        tasks.append(Task(f"csv-{name}", load_csv(path, label, 0.5, seed)))
    return tasks


def _task_seed(seed, regime, i):
    return int(np.random.SeedSequence([seed, regime, i]).generate_state(1, np.uint32)[0])


@dataclass
class BenchRow:
    task: str
    model: str
    accuracy: float  # nan when unsupported
    rel_acc_vs_knn: float
    seconds: float
    supported: bool = True
    route: str = "native"


def run_bench(models, tasks, k=5, dtype=np.float32, n_ens=1, seed=0):
    """Score KNN and each named model on every task.

    ``models`` maps a display name to a loaded model.  Rows come back sorted
    by (task, model).
    """
    rows = []
    for task in tasks:
        ep = task.episode
        t0 = time.perf_counter()
        knn_acc = accuracy(knn_predict(ep, min(k, ep.N)), ep)
        knn_sec = time.perf_counter() - t0
        rows.append(BenchRow(task.name, "knn", knn_acc, 0.0, knn_sec))
        for name, model in models.items():
            route = "ecoc" if model.kind == "baseline" and ep.q > model.config.q_max else "native"
            try:
                predict = predictor_for(model, n_ens, seed)
                batch = EpisodeBatch.from_episodes([ep.astype(dtype)])
                t0 = time.perf_counter()
                probs = np.asarray(predict(batch))[0]
                sec = time.perf_counter() - t0
            except CapacityError:
                rows.append(BenchRow(task.name, name, math.nan, math.nan, math.nan, False, route))
                continue
            acc = accuracy(probs, ep)
            rel = 100.0 * (acc - knn_acc) / knn_acc if knn_acc > 0 else math.nan
            rows.append(BenchRow(task.name, name, acc, rel, sec, True, route))
    rows.sort(key=lambda r: (r.task, r.model))
    return rows


def bench_medians(rows):
    out = {}
    for name in sorted({r.model for r in rows}):
        sel = [r for r in rows if r.model == name and r.supported]
        if not sel:
            out[name] = (math.nan, math.nan, math.nan)
            continue
        out[name] = (float(np.median([r.accuracy for r in sel])),
                     float(np.median([r.rel_acc_vs_knn for r in sel])),
                     float(np.median([r.seconds for r in sel])))
    return out


# ---------------------------------------------------------------------------
# equivariance audit
# ---------------------------------------------------------------------------


def lab_episodes(n, q_range, seed, total=64, p_range=(2, 8), family="blobs", separation=3.0):
    prior = PriorConfig(n_range=(max(q_range[1], total // 4), total * 3 // 4), total=total,
                        p_range=p_range, q_range=q_range, family=family, separation=separation)
    return [sample_episode(prior, _task_seed(seed, 3, i)) for i in range(n)]


@dataclass
class EquigapResult:
    violation: float
    gap_ce: object
    gap_sq: object
    identity: object
    sweep: list


def run_equigap(model, n_episodes=64, q_range=(2, 4), n_perms=4, sweep_q=5, sweep_sizes=(1, 2, 4, 8),
                identity_q=3, identity_episodes=32, seed=0):
    predict = predictor_for(model)
    episodes = lab_episodes(n_episodes, q_range, seed)
    violation = violation_rate(predict, episodes, n_perms, seed)
    gap_ce = gap_estimate(predict, episodes, "ce", "exhaustive", seed=seed)
    gap_sq = gap_estimate(predict, episodes, "sq", "exhaustive", seed=seed)
    identity = sq_identity_check(predict, lab_episodes(identity_episodes, (identity_q, identity_q), seed + 1),
                                 "exhaustive", seed=seed)
    sweep_eps = lab_episodes(n_episodes, (sweep_q, sweep_q), seed + 2)
    sweep = ensemble_sweep(lambda n: predictor_for(model, n, seed), sweep_eps, sweep_sizes, n_perms, seed)
    return EquigapResult(violation, gap_ce, gap_sq, identity, sweep)


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _primitive_cases(rng):
    """(name, function of tensors -> scalar, input arrays) for every differentiable primitive."""
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    # fixed random weights so every output element carries a distinct cotangent
    w, w_batched, w_cat = r(3, 4, 5), r(2, 3, 4, 5), r(3, 4, 5)
    mask = np.array([[True, False, True, True, True]] * 4)
    onehot = np.eye(5)[rng.integers(0, 5, size=(3, 4))]
    return [
        ("add", lambda a, b: ((a + b) * w).sum(), [r(3, 4, 5), r(4, 5)]),
        ("sub", lambda a, b: ((a - b) * w).sum(), [r(3, 4, 5), r(1, 5)]),
        ("mul", lambda a, b: ((a * b) * w).sum(), [r(3, 4, 5), r(3, 1, 5)]),
        ("div", lambda a, b: ((a / b) * w).sum(), [r(3, 4, 5), 2.0 + np.abs(r(5))]),
        ("neg", lambda a: ((-a) * w).sum(), [r(3, 4, 5)]),
        ("pow", lambda a: ((a ** 3) * w).sum(), [r(3, 4, 5)]),
        ("exp", lambda a: (T.exp(a) * w).sum(), [r(3, 4, 5)]),
        ("log", lambda a: (T.log(a) * w).sum(), [0.5 + np.abs(r(3, 4, 5))]),
        ("tanh", lambda a: (T.tanh(a) * w).sum(), [r(3, 4, 5)]),
        ("gelu", lambda a: (T.gelu(a) * w).sum(), [r(3, 4, 5)]),
        ("matmul", lambda a, b: ((a @ b) * w).sum(), [r(3, 4, 6), r(6, 5)]),
        ("matmul_batched", lambda a, b: ((a @ b) * w_batched).sum(), [r(2, 3, 4, 6), r(3, 6, 5)]),
        ("reshape", lambda a: (a.reshape(4, 15) * w.reshape(4, 15)).sum(), [r(3, 4, 5)]),
        ("transpose", lambda a: (a.transpose(2, 0, 1) * np.transpose(w, (2, 0, 1))).sum(), [r(3, 4, 5)]),
        ("swapaxes", lambda a: (T.swapaxes(a, 0, 2) * np.swapaxes(w, 0, 2)).sum(), [r(3, 4, 5)]),
        ("getitem", lambda a: (a[:, 1:3] * w[:, :2]).sum(), [r(3, 4, 5)]),
        ("getitem_fancy", lambda a: (a[[0, 2, 0]] * w).sum(), [r(3, 4, 5)]),
        ("concatenate", lambda a, b: (T.concatenate([a, b], axis=1) * w_cat).sum(), [r(3, 2, 5), r(3, 2, 5)]),
        ("stack", lambda a, b: (T.stack([a, b], axis=0)[1] * w).sum(), [r(3, 4, 5), r(3, 4, 5)]),
        ("broadcast_to", lambda a: (T.broadcast_to(a, (3, 4, 5)) * w).sum(), [r(4, 1)]),
        ("sum_axis", lambda a: (a.sum(axis=1) * w[:, 0]).sum(), [r(3, 4, 5)]),
        ("mean", lambda a: (a.mean(axis=(0, 2), keepdims=True) * w[:1, :, :1]).sum(), [r(3, 4, 5)]),
        ("softmax_masked", lambda a: (T.softmax_masked(a, mask) * w).sum(), [r(3, 4, 5)]),
        ("log_softmax", lambda a: (T.log_softmax(a) * w).sum(), [r(3, 4, 5)]),
        ("layer_norm", lambda a, g, b: (T.layer_norm(a, g, b) * w).sum(), [r(3, 4, 5), r(5), r(5)]),
        ("cross_entropy", lambda a: T.cross_entropy_from_logits(a, onehot), [r(3, 4, 5)]),
    ]


def primitive_gradchecks(seed=0, step=1e-4):
    rng = np.random.default_rng(seed)
    return [(name, T.gradcheck(fn, arrays, step)) for name, fn, arrays in _primitive_cases(rng)]


def tiny_config():
    return ModelConfig(d=8, n_layers=2, n_heads=2, hidden=8, p_max=4, decoder_hidden=4, q_max=3)


def tiny_batch(seed=0, n=5, m=3, p=3, q=3):
    prior = PriorConfig(n_range=(n, n), total=n + m, p_range=(p, p), q_range=(q, q))
    return EpisodeBatch.from_episodes([sample_episode(prior, seed)])


def model_gradcheck(kind="equitab", seed=0, step=1e-4):
    """Worst relative error of the training loss gradient per parameter group, 64-bit."""
    from .trainer import loss_on_batch

    cfg = tiny_config()
    cls = EquiTabModel if kind == "equitab" else BaselineModel
    model = cls.initialize(cfg, seed, np.float64)
    batch = tiny_batch(seed)
    names = list(model.params)
    loss = loss_on_batch(model, batch)
    grads = T.backward(loss)
    analytic = {p.name: grads[p] for p in model.params.values()}
    results = []
    for name in names:
        p = model.params[name]
        orig = p.data.copy()
        num = np.zeros_like(orig)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            for sign in (1, -1):
                flat[i] = orig.reshape(-1)[i] + sign * step
                with T.no_grad():
                    val = loss_on_batch(model, batch).item()
                num.reshape(-1)[i] += sign * val / (2 * step)
            flat[i] = orig.reshape(-1)[i]
        results.append((f"{kind}:{name}", T.relative_error(analytic[name], num)))
    return results


def run_gradcheck(seed=0):
    return primitive_gradchecks(seed) + model_gradcheck("equitab", seed) + model_gradcheck("baseline", seed)


def accuracy_summary(model, episodes, dtype=np.float32, n_ens=1, seed=0):
    predict = predictor_for(model, n_ens, seed)
    accs = []
    for ep in episodes:
        probs = np.asarray(predict(EpisodeBatch.from_episodes([ep.astype(dtype)])))[0]
        accs.append(accuracy(probs, ep))
    return accs

