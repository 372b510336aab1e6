"""Gaussian-mixture generative ensemble over member score vectors.

Member scores are z-scored (scales differ by orders of magnitude between
energy-like and probability-like members), then a full-covariance
mixture is fitted by EM. The log-likelihood of a sample's score vector
under the fitted mixture is the ensemble's ID-score: it is sensitive to
jointly atypical score combinations even when every marginal looks
ordinary.

The component count is chosen among a small candidate set by held-out
in-distribution error-detection AUC, and members are pruned greedily so
that no two admitted scores are highly correlated on clean validation
data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp as _lse

from . import _accel
from .errors import EvaluationError, FitError, FormatError, NumericalError, SelectionError
from .evaluate import auroc
from .ingest import DatasetBundle
from .scores import EnsembleDefinition, score_bundle
from .stats import FittedStats

STD_FLOOR = 1e-12
COLLAPSE_WEIGHT = 1e-8
DEFAULT_CANDIDATES = (1, 2, 5, 10, 20)


@dataclass(frozen=True)
class GmmModel:
    """Fitted mixture plus the standardization applied before EM."""

    weights: np.ndarray  # (n,)
    means: np.ndarray  # (n, K)
    covariances: np.ndarray  # (n, K, K)
    standardize_mean: np.ndarray  # (K,)
    standardize_std: np.ndarray  # (K,)
    meta: dict

    @property
    def n_components(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])


@dataclass(frozen=True)
class TrainingSplit:
    """Seeded disjoint split of an ID validation bundle's score vectors."""

    x_train: np.ndarray  # (M, K) scores of correctly classified train-side samples
    train_ids: np.ndarray  # (M,) sample ids of x_train rows
    heldout_scores: np.ndarray  # (H, K)
    heldout_correct: np.ndarray  # (H,) bool
    heldout_ids: np.ndarray  # (H,)


def standardize_fit(score_matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and standard deviation (1/N), std floored at 1e-12."""
    x = np.asarray(score_matrix, dtype=np.float64)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return mean, std


def standardize_apply(score_matrix, mean, std) -> np.ndarray:
    return (np.asarray(score_matrix, dtype=np.float64) - mean) / std


def _kmeans_plusplus(x: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((n_clusters, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for k in range(1, n_clusters):
        total = closest.sum()
        if total > 0.0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            idx = int(rng.integers(n))
        centers[k] = x[idx]
        np.minimum(closest, ((x - centers[k]) ** 2).sum(axis=1), out=closest)
    return centers


def _m_step(x, resp, reg):
    n, dim = x.shape
    nk = resp.sum(axis=0)
    nk_safe = np.maximum(nk, 10.0 * np.finfo(np.float64).tiny)
    weights = nk / n
    means = (resp.T @ x) / nk_safe[:, None]
    covs = np.empty((resp.shape[1], dim, dim))
    eye = reg * np.eye(dim)
    for k in range(resp.shape[1]):
        diff = x - means[k]
        cov = (resp[:, k][:, None] * diff).T @ diff / nk_safe[k]
        covs[k] = 0.5 * (cov + cov.T) + eye
    return weights, means, covs


def _chol_all(covs: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"component covariance not positive-definite: {exc}") from exc


def _log_densities(x, weights, means, covs):
    chols = _chol_all(covs)
    log_w = np.log(np.maximum(weights, np.finfo(np.float64).tiny))
    return _accel.mixture_logpdfs(x, means, chols, log_w)


def _run_em(x, n_components, rng, reg, tol, max_iter):
    """One EM run from a k-means++ hard-assignment initialization."""
    n = x.shape[0]
    centers = _kmeans_plusplus(x, n_components, rng)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, n_components))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0
    weights, means, covs = _m_step(x, resp, reg)
    global_cov = None

    log_dens = _log_densities(x, weights, means, covs)
    log_norm = _lse(log_dens, axis=1)
    ll_history = [float(log_norm.mean())]
    converged = False
    collapse_reinits = 0
    n_iter = 0
    for _ in range(max_iter):
        resp = np.exp(log_dens - log_norm[:, None])
        weights, means, covs = _m_step(x, resp, reg)
        n_iter += 1

        collapsed = np.flatnonzero(weights < COLLAPSE_WEIGHT)
        if collapsed.size:
            if global_cov is None:
                centered = x - x.mean(axis=0)
                global_cov = centered.T @ centered / n + reg * np.eye(x.shape[1])
            worst = int(np.argmin(log_norm))
            for k in collapsed:
                means[k] = x[worst]
                covs[k] = global_cov
                weights[k] = 1.0 / n
                collapse_reinits += 1
            weights = weights / weights.sum()

        log_dens = _log_densities(x, weights, means, covs)
        log_norm = _lse(log_dens, axis=1)
        avg_ll = float(log_norm.mean())
        prev = ll_history[-1]
        ll_history.append(avg_ll)
        if (avg_ll - prev) < tol * max(abs(prev), 1e-12):
            converged = True
            break
    return weights, means, covs, ll_history, converged, collapse_reinits, n_iter


def gmm_fit(
    x: np.ndarray,
    n_components: int,
    *,
    seed: int = 0,
    reg_covar: float = 1e-6,
    tol: float = 1e-6,
    max_iter: int = 500,
    restarts: int = 3,
    standardization: tuple[np.ndarray, np.ndarray] | None = None,
) -> GmmModel:
    """Fit a full-covariance mixture to standardized score vectors by EM.

    Every M-step adds ``reg_covar * I`` to each covariance. A component
    whose weight drops under 1e-8 is re-seeded at the current
    lowest-likelihood point. ``restarts`` independent k-means++
    initializations run; the best final average log-likelihood wins (the
    first restart on ties). Fixed seed gives a bit-identical model.

    ``standardization`` is stored on the model for raw-score evaluation;
    it is NOT applied to ``x``, which must already be standardized.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"score matrix must be (N, K) with K >= 1, got {x.shape}")
    if n_components < 1:
        raise ValueError(f"n_components must be >= 1, got {n_components}")
    if x.shape[0] < 10 * n_components:
        raise FitError(
            f"need at least {10 * n_components} samples for {n_components} "
            f"components, got {x.shape[0]}"
        )
    if standardization is None:
        standardization = (np.zeros(x.shape[1]), np.ones(x.shape[1]))

    master = np.random.SeedSequence(seed)
    children = master.spawn(restarts)
    best = None
    best_restart = -1
    failures = []
    for r in range(restarts):
        rng = np.random.default_rng(children[r])
        try:
            result = _run_em(x, n_components, rng, reg_covar, tol, max_iter)
        except NumericalError as exc:
            failures.append(f"restart {r}: {exc}")
            continue
        if best is None or result[3][-1] > best[3][-1]:
            best = result
            best_restart = r
    if best is None:
        raise FitError(
            f"EM failed in all {restarts} restarts: " + "; ".join(failures)
        )
    weights, means, covs, ll_history, converged, collapse_reinits, n_iter = best
    meta = {
        "seed": int(seed),
        "n_iter": int(n_iter),
        "final_avg_loglik": float(ll_history[-1]),
        "reg_covar": float(reg_covar),
        "tol": float(tol),
        "restarts": int(restarts),
        "best_restart": int(best_restart),
        "converged": bool(converged),
        "collapse_reinits": int(collapse_reinits),
        "ll_history": [float(v) for v in ll_history],
    }
    return GmmModel(
        weights=weights,
        means=means,
        covariances=covs,
        standardize_mean=np.asarray(standardization[0], dtype=np.float64),
        standardize_std=np.asarray(standardization[1], dtype=np.float64),
        meta=meta,
    )


def fit_score_model(raw_scores: np.ndarray, n_components: int, **kwargs) -> GmmModel:
    """Standardize raw member scores, fit the mixture, stash the transform."""
    mean, std = standardize_fit(raw_scores)
    z = standardize_apply(raw_scores, mean, std)
    return gmm_fit(z, n_components, standardization=(mean, std), **kwargs)


def gmm_loglik(model: GmmModel, x):
    """Mixture log-density of raw score vectors; higher = in-distribution.

    Accepts one (K,) vector or an (N, K) matrix; standardizes with the
    model's stored parameters, then takes a stable log-sum-exp over the
    component log-densities.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != model.dim:
        raise ValueError(f"expected {model.dim}-dim score vectors, got {arr.shape[1]}")
    z = (arr - model.standardize_mean) / model.standardize_std
    log_dens = _log_densities(z, model.weights, model.means, model.covariances)
    out = _lse(log_dens, axis=1)
    return float(out[0]) if single else out


def select_n_components(
    x_train: np.ndarray,
    heldout_scores: np.ndarray,
    heldout_correct: np.ndarray,
    candidates=DEFAULT_CANDIDATES,
    **gmm_kwargs,
) -> tuple[int, dict[int, float]]:
    """Pick the component count by held-out ID error-detection AUC.

    For each candidate, fit on the (correct-prediction-only) training
    scores, score the held-out ID samples, and compute the AUC of
    correctly classified against misclassified samples. Ties resolve to
    the smaller count. Candidates too large for the sample-size
    precondition (N >= 10 n) are skipped.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    heldout_correct = np.asarray(heldout_correct, dtype=bool)
    aucs: dict[int, float] = {}
    best_n = None
    best_auc = -np.inf
    for n in sorted(candidates):
        if x_train.shape[0] < 10 * n:
            continue
        model = fit_score_model(x_train, n, **gmm_kwargs)
        ll = gmm_loglik(model, heldout_scores)
        auc = auroc(ll[heldout_correct], ll[~heldout_correct])
        aucs[n] = auc
        if auc > best_auc:
            best_auc = auc
            best_n = n
    if best_n is None:
        raise FitError(
            f"no candidate component count is feasible for {x_train.shape[0]} samples"
        )
    return best_n, aucs


def select_members(
    score_matrix: np.ndarray,
    member_names,
    ed_auc,
    corr_threshold: float = 0.95,
) -> tuple[list[str], np.ndarray]:
    """Greedy redundancy pruning on clean-validation score correlations.

    Members whose in-distribution error-detection AUC falls in the
    near-random band [0.45, 0.55] are dropped first. The rest are
    processed in descending ED-AUC order; a member is admitted iff its
    absolute Pearson correlation with every already-admitted member is
    below ``corr_threshold``. Returns the admitted names (admission
    order) and the full correlation matrix over all input members.
    """
    member_names = list(member_names)
    x = np.asarray(score_matrix, dtype=np.float64)
    if x.shape[1] != len(member_names):
        raise ValueError("score matrix width does not match member_names")
    auc_by_name = {name: float(ed_auc[name]) for name in member_names}
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(x, rowvar=False)
    corr = np.atleast_2d(corr)
    corr_safe = np.nan_to_num(corr)  # constant columns correlate with nothing
    index = {name: i for i, name in enumerate(member_names)}

    eligible = [n for n in member_names if not 0.45 <= auc_by_name[n] <= 0.55]
    eligible.sort(key=lambda n: -auc_by_name[n])
    admitted: list[str] = []
    for name in eligible:
        i = index[name]
        if all(abs(corr_safe[i, index[a]]) < corr_threshold for a in admitted):
            admitted.append(name)
    if len(admitted) < 2:
        raise SelectionError(
            f"only {len(admitted)} member(s) admitted; need at least 2"
        )
    return admitted, corr


def build_training_matrix(
    bundle: DatasetBundle,
    stats: FittedStats,
    ensemble: EnsembleDefinition,
    validation_fraction: float = 0.2,
    seed: int = 0,
    temperature: float = 1.0,
) -> TrainingSplit:
    """Score the ID validation bundle and split it for GMM fitting.

    The held-out side (``validation_fraction`` of records, seeded
    permutation) keeps its correctness flags for component selection;
    the training side keeps only correctly classified samples, since
    misclassified ID inputs produce atypical score vectors.
    """
    if not 0.0 < validation_fraction < 1.0:
        raise ValueError(f"validation_fraction must be in (0, 1), got {validation_fraction}")
    if (bundle.labels < 0).any():
        raise EvaluationError(
            f"{bundle.dataset_id}: training matrix requires ground-truth labels "
            "on every record"
        )
    scores = score_bundle(bundle, stats, ensemble, temperature)
    n = len(bundle)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    h = int(round(validation_fraction * n))
    held_idx, train_idx = perm[:h], perm[h:]
    correct = bundle.predictions == bundle.labels
    keep = train_idx[correct[train_idx]]
    if keep.size == 0:
        raise FitError(
            f"{bundle.dataset_id}: no correctly classified samples on the training side"
        )
    return TrainingSplit(
        x_train=scores[keep],
        train_ids=bundle.sample_ids[keep],
        heldout_scores=scores[held_idx],
        heldout_correct=correct[held_idx],
        heldout_ids=bundle.sample_ids[held_idx],
    )


def save_gmm(model: GmmModel, directory: str | Path, ensemble_id: str) -> Path:
    """Write ``gmm_<id>.json`` plus NPY arrays; reload is bit-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"n_components": model.n_components, "meta": model.meta}
    (directory / f"gmm_{ensemble_id}.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    np.save(directory / f"gmm_{ensemble_id}_weights.npy", model.weights)
    np.save(directory / f"gmm_{ensemble_id}_means.npy", model.means)
    np.save(directory / f"gmm_{ensemble_id}_covariances.npy", model.covariances)
    np.save(
        directory / f"gmm_{ensemble_id}_standardization.npy",
        np.stack([model.standardize_mean, model.standardize_std]),
    )
    return directory


def load_gmm(directory: str | Path, ensemble_id: str) -> GmmModel:
    directory = Path(directory)
    meta_path = directory / f"gmm_{ensemble_id}.json"
    if not meta_path.is_file():
        raise FormatError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    standardization = np.load(directory / f"gmm_{ensemble_id}_standardization.npy")
    return GmmModel(
        weights=np.load(directory / f"gmm_{ensemble_id}_weights.npy"),
        means=np.load(directory / f"gmm_{ensemble_id}_means.npy"),
        covariances=np.load(directory / f"gmm_{ensemble_id}_covariances.npy"),
        standardize_mean=standardization[0],
        standardize_std=standardization[1],
        meta=meta["meta"],
    )
