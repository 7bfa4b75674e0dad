"""Equivariance measurements: violation rate, symmetrised predictors, equivariance gap.

A predictor is any callable mapping an ``EpisodeBatch`` to class-probability
rows of shape (B, M, q).  For one episode the permuted copies
sigma(Y) for all sigma under study share dimensions, so they are stacked
into a single batch and evaluated in one call.

Two estimators of the gap L(f) - L(fbar) are provided.

exhaustive
    fbar averages sigma^-1 f(sigma(Y)) over all q! permutations, and L(f) is
    averaged over the same permuted copies of each episode (the empirical
    episode set closed under relabelling).  Under squared loss the gap then
    equals the mean of ||sigma^-1 f(sigma(Y)) - fbar||^2 exactly.
sampled
    fbar averages over n sampled permutations and L(f) is evaluated on the
    episodes as given.  The squared-loss identity then holds in expectation
    over a relabelling-invariant prior, up to an O(1/n) bias from estimating
    fbar.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .baseline import all_permutations, average_over_permutations, sample_permutations
from .errors import CostGuardError
from .prior import EpisodeBatch, as_batch, permute_targets

EXHAUSTIVE_MAX_Q = 4
TINY = 1e-300


def _predict_permuted(predictor, episode, perms):
    """Stack sigma^-1 f(X, sigma(Y), X*) for each sigma: shape (len(perms), M, q)."""
    batch = EpisodeBatch.from_episodes([permute_targets(episode, s) for s in perms])
    preds = np.asarray(predictor(batch), dtype=np.float64)
    return np.stack([s.unapply(p) for s, p in zip(perms, preds)])


def _predict_one(predictor, episode):
    return np.asarray(predictor(as_batch(episode)), dtype=np.float64)[0]


def _exhaustive_perms(q, allow_large):
    if q > EXHAUSTIVE_MAX_Q and not allow_large:
        raise CostGuardError(f"exhaustive symmetrisation at q={q} needs {math.factorial(q)} model calls "
                             f"per prediction; pass allow_large=True to proceed")
    return all_permutations(q)


def violation_rate(predictor, episodes, n_perms, seed=0, return_counts=False):
    """Fraction of (episode, sigma, test point) triples whose argmax moves under relabelling.

    Compares argmax of sigma^-1 f(sigma(Y)) with argmax of f(Y); np.argmax
    breaks ties at the lowest index on both sides.
    """
    if n_perms < 1:
        raise ValueError("n_perms must be at least 1")
    rng = np.random.default_rng(seed)
    flips = total = 0
    for ep in episodes:
        perms = sample_permutations(ep.q, n_perms, int(rng.integers(2**63)))
        base = _predict_one(predictor, ep).argmax(-1)
        moved = _predict_permuted(predictor, ep, perms).argmax(-1)
        flips += int((moved != base[None]).sum())
        total += moved.size
    rate = flips / total if total else 0.0
    return (rate, flips, total) if return_counts else rate


def symmetrize(predictor, q, mode="exhaustive", n=None, seed=0, allow_large=False):
    """The symmetrised predictor fbar over all (or ``n`` sampled) permutations of q slots."""
    if mode == "exhaustive":
        perms = _exhaustive_perms(q, allow_large)
    elif mode == "sampled":
        if not n or n < 1:
            raise ValueError("sampled mode needs n >= 1")
        perms = sample_permutations(q, n, seed)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    def fbar(batch):
        return average_over_permutations(predictor, batch, perms)

    fbar.permutations = perms
    return fbar


def pointwise_loss(probs, targets, loss):
    """Per-row loss on probability rows: 'ce' = -log p[y], 'sq' = sum_j (p_j - y_j)^2."""
    if loss == "ce":
        return -np.log(np.maximum((probs * targets).sum(-1), TINY))
    if loss == "sq":
        return ((probs - targets) ** 2).sum(-1)
    raise ValueError(f"unknown loss {loss!r}")


@dataclass
class GapReport:
    loss: str
    mode: str
    loss_f: float
    loss_fbar: float
    gap: float
    gap_stderr: float
    sq_identity_lhs: float
    sq_identity_rhs: float
    identity_stderr: float
    violation_rate: float
    n_episodes: int
    n_perms: int
    exhaustive: bool

    def to_text(self):
        return "".join(f"{k}: {_fmt(v)}\n" for k, v in asdict(self).items())

    def summary_line(self):
        """One JSON object; non-finite floats become null."""
        return json.dumps({k: None if isinstance(v, float) and not math.isfinite(v) else v
                           for k, v in asdict(self).items()}, sort_keys=True)

    def gap_near_zero(self, k=2.0, floor=1e-9):
        """|gap| within k standard errors; ``floor`` absorbs rounding when the stderr itself is ~0."""
        return abs(self.gap) <= max(k * self.gap_stderr, floor)


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def _stderr(values):
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def gap_terms(predictor, episode, loss, mode="exhaustive", n_perms=None, seed=0, allow_large=False):
    """Per-episode (loss_f, loss_fbar, ||f - fbar||^2 mean, violation fraction)."""
    q = episode.q
    base = _predict_one(predictor, episode)
    if mode == "exhaustive":
        perms = _exhaustive_perms(q, allow_large)
        P = _predict_permuted(predictor, episode, perms)
        fbar = P.mean(axis=0)
        loss_f = pointwise_loss(P, episode.Ystar[None], loss).mean()
        spread = ((P - fbar[None]) ** 2).sum(-1).mean()
    elif mode == "sampled":
        perms = sample_permutations(q, n_perms, seed)
        P = _predict_permuted(predictor, episode, perms)
        fbar = P.mean(axis=0)
        loss_f = pointwise_loss(base, episode.Ystar, loss).mean()
        spread = ((base - fbar) ** 2).sum(-1).mean()
    else:
        raise ValueError(f"unknown mode {mode!r}")
    loss_fbar = pointwise_loss(fbar, episode.Ystar, loss).mean()
    violations = (P.argmax(-1) != base.argmax(-1)[None]).mean()
    return float(loss_f), float(loss_fbar), float(spread), float(violations), len(perms)


def gap_estimate(predictor, episodes, loss="ce", mode="exhaustive", n_perms=None, seed=0,
                 allow_large=False):
    rng = np.random.default_rng(seed)
    rows = []
    for ep in episodes:
        rows.append(gap_terms(predictor, ep, loss, mode, n_perms, int(rng.integers(2**63)), allow_large))
    arr = np.array([r[:4] for r in rows], dtype=np.float64)
    per_gap = arr[:, 0] - arr[:, 1]
    loss_f, loss_fbar = float(arr[:, 0].mean()), float(arr[:, 1].mean())
    gap = loss_f - loss_fbar
    is_sq = loss == "sq"
    return GapReport(
        loss=loss, mode=mode, loss_f=loss_f, loss_fbar=loss_fbar, gap=gap,
        gap_stderr=_stderr(per_gap),
        sq_identity_lhs=gap if is_sq else math.nan,
        sq_identity_rhs=float(arr[:, 2].mean()) if is_sq else math.nan,
        identity_stderr=_stderr(per_gap - arr[:, 2]) if is_sq else math.nan,
        violation_rate=float(arr[:, 3].mean()),
        n_episodes=len(episodes), n_perms=rows[0][4] if rows else 0, exhaustive=mode == "exhaustive",
    )


@dataclass
class IdentityCheck:
    passed: bool
    lhs: float
    rhs: float
    margin: float
    tolerance: float
    report: GapReport

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict}: gap={self.lhs!r} E||f-fbar||^2={self.rhs!r} "
                f"|diff|={self.margin!r} tolerance={self.tolerance!r}")


def sq_identity_check(predictor, episodes, mode="exhaustive", n_perms=None, seed=0, exact_tol=1e-6,
                      k=3.0, allow_large=False):
    """Squared-loss gap against the mean squared distance to the symmetrised predictor.

    Exhaustive mode requires agreement within ``exact_tol``; sampled mode
    within ``k`` standard errors of the per-episode difference.
    """
    report = gap_estimate(predictor, episodes, "sq", mode, n_perms, seed, allow_large)
    margin = abs(report.sq_identity_lhs - report.sq_identity_rhs)
    tol = exact_tol if mode == "exhaustive" else max(k * report.identity_stderr, exact_tol)
    return IdentityCheck(margin <= tol, report.sq_identity_lhs, report.sq_identity_rhs, margin, tol, report)


def ensemble_sweep(predictor_for, episodes, sizes=(1, 2, 4, 8), n_perms=4, seed=0):
    """Violation rate of ``predictor_for(n_ens)`` for each ensemble size, same episodes and sigmas."""
    return [(n, violation_rate(predictor_for(n), episodes, n_perms, seed)) for n in sizes]
