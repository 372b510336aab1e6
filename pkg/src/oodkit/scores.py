"""The fourteen detection statistics, all oriented "higher = in-distribution".

Logit-only scores accept a single logit vector or an (N, C) batch and
return a float or an (N,) array. Scores that need features or fitted
statistics come in two forms: a per-record function taking a
SampleRecord (the reference semantics) and a vectorized batch path used
by ``score_bundle``. The two agree to float64 rounding; tests pin that.

Sign conventions (all monotone transforms preserve downstream AUC):
    msp, odin           max softmax probability (odin at temperature 1000)
    max_logit           max logit
    logit_norm          L2 norm of the logits
    ebo                 T * logsumexp(logits / T), the negated energy
    doctor_alpha        sum of squared softmax probabilities
    mds_f/mds_l/mds_all max over classes of the negated Mahalanobis
                        quadratic form (first layer / last layer / mean
                        over all fitted layers)
    react               energy after clipping penultimate activations
    gradnorm            L1 gradient norm of cross-entropy to uniform,
                        factorized as ||p - 1/C||_1 * ||f||_1
    dice                energy over the sparsified head (W * mask) f + b
    vim                 logsumexp(logits) - alpha * principal-residual norm
    cadet               mean pairwise cosine similarity across views
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _accel
from .errors import CapabilityError, DataError
from .ingest import DatasetBundle, SampleRecord
from .stats import FittedStats, LayerGaussianStats

ODIN_TEMPERATURE = 1000.0

MEMBER_NAMES = (
    "msp",
    "max_logit",
    "logit_norm",
    "ebo",
    "doctor_alpha",
    "odin",
    "mds_f",
    "mds_l",
    "mds_all",
    "react",
    "gradnorm",
    "dice",
    "vim",
    "cadet",
)


@dataclass(frozen=True)
class EnsembleDefinition:
    """Named, ordered list of member scores."""

    ensemble_id: str
    members: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.members)) != len(self.members):
            raise ValueError(f"{self.ensemble_id}: duplicate member names")
        unknown = [m for m in self.members if m not in MEMBER_NAMES]
        if unknown:
            raise ValueError(f"{self.ensemble_id}: unresolvable members {unknown}")


BUILTIN_ENSEMBLES = {
    "Ens-V": EnsembleDefinition(
        "Ens-V",
        ("gradnorm", "odin", "mds_all", "mds_l", "cadet", "dice", "msp", "max_logit"),
    ),
    "Ens-R": EnsembleDefinition(
        "Ens-R",
        ("gradnorm", "odin", "mds_all", "mds_l", "cadet", "react", "vim", "doctor_alpha"),
    ),
    "Ens-F": EnsembleDefinition(
        "Ens-F",
        ("msp", "max_logit", "mds_all", "mds_l", "ebo"),
    ),
}


@dataclass(frozen=True)
class ScoreVector:
    """Member scores of one sample, ordered per the ensemble definition."""

    ensemble_id: str
    values: np.ndarray  # (K,) float64
    sample_id: int


def _as_batch(logits) -> tuple[np.ndarray, bool]:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _unwrap(values: np.ndarray, single: bool):
    return float(values[0]) if single else values


def _softmax(batch: np.ndarray) -> np.ndarray:
    shifted = batch - batch.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def msp(logits):
    """Maximum softmax probability, computed with max subtraction."""
    batch, single = _as_batch(logits)
    return _unwrap(_softmax(batch).max(axis=1), single)


def max_logit(logits):
    batch, single = _as_batch(logits)
    return _unwrap(batch.max(axis=1), single)


def logit_norm(logits):
    batch, single = _as_batch(logits)
    return _unwrap(np.linalg.norm(batch, axis=1), single)


def energy(logits, temperature: float = 1.0):
    """T * logsumexp(logits / T); the negated energy score."""
    batch, single = _as_batch(logits)
    return _unwrap(temperature * logsumexp(batch / temperature, axis=1), single)


def doctor_alpha(logits):
    """Sum of squared softmax probabilities (monotone form of D_alpha)."""
    batch, single = _as_batch(logits)
    probs = _softmax(batch)
    return _unwrap(np.einsum("ij,ij->i", probs, probs), single)


def odin(record: SampleRecord) -> float:
    """MSP of the upstream-perturbed logits at temperature 1000."""
    if record.odin_logits is None:
        raise CapabilityError("odin: record has no odin_logits channel")
    return msp(np.asarray(record.odin_logits, dtype=np.float64) / ODIN_TEMPERATURE)


def mds_layer(record: SampleRecord, layer_stats: LayerGaussianStats) -> float:
    """max over classes of -(f - mu_c)^T P (f - mu_c) for one layer."""
    f = np.asarray(record.features[layer_stats.layer_name], dtype=np.float64)
    diffs = layer_stats.class_means - f[None, :]
    quad = np.einsum("ij,ij->i", diffs @ layer_stats.shared_precision, diffs)
    return float(-quad.min())


def mds_all(record: SampleRecord, stats: FittedStats) -> float:
    """Equal-weight mean of the per-layer Mahalanobis scores."""
    values = [mds_layer(record, stats.layers[name]) for name in stats.layer_names]
    return float(np.mean(values))


def react_energy(record: SampleRecord, stats: FittedStats, temperature: float = 1.0) -> float:
    """Energy of logits recomputed from clipped penultimate activations."""
    f = np.asarray(record.features[stats.head.penultimate_layer], dtype=np.float64)
    clipped = np.minimum(f, stats.react.clip_value)
    logits = np.asarray(stats.head.weight, dtype=np.float64) @ clipped + np.asarray(
        stats.head.bias, dtype=np.float64
    )
    return energy(logits, temperature)


def gradnorm(record: SampleRecord, stats: FittedStats, temperature: float = 1.0) -> float:
    """||softmax(logits/T) - 1/C||_1 * ||f||_1.

    This is the L1 norm of the gradient of cross-entropy to the uniform
    distribution with respect to the head weights: the gradient is the
    outer product (p - u) f^T, whose entrywise absolute sum factorizes.
    """
    logits = np.asarray(record.logits, dtype=np.float64)
    f = np.asarray(record.features[stats.head.penultimate_layer], dtype=np.float64)
    probs = _softmax(logits[None, :] / temperature)[0]
    return float(np.abs(probs - 1.0 / logits.size).sum() * np.abs(f).sum())


def dice_energy(record: SampleRecord, stats: FittedStats, temperature: float = 1.0) -> float:
    """Energy over the contribution-sparsified head (W * mask) f + b."""
    f = np.asarray(record.features[stats.head.penultimate_layer], dtype=np.float64)
    masked = np.asarray(stats.head.weight, dtype=np.float64) * stats.dice.mask
    logits = masked @ f + np.asarray(stats.head.bias, dtype=np.float64)
    return energy(logits, temperature)


def vim(record: SampleRecord, stats: FittedStats) -> float:
    """logsumexp(logits) - alpha * norm of the component outside the basis."""
    f = np.asarray(record.features[stats.head.penultimate_layer], dtype=np.float64)
    centered = f - stats.vim.offset
    basis = stats.vim.principal_basis
    residual = centered - basis @ (basis.T @ centered)
    logits = np.asarray(record.logits, dtype=np.float64)
    return float(logsumexp(logits) - stats.vim.alpha * np.linalg.norm(residual))


def cadet_intra_similarity(record: SampleRecord) -> float:
    """Mean pairwise cosine similarity among the transformed views.

    Zero-norm views contribute similarity 0 to every pair they touch.
    """
    if record.view_features is None:
        raise CapabilityError("cadet: record has no view_features channel")
    views = np.asarray(record.view_features, dtype=np.float64)
    v = views.shape[0]
    norms = np.linalg.norm(views, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = views / safe[:, None]
    gram = unit @ unit.T
    upper = gram[np.triu_indices(v, k=1)]
    return float(upper.sum() * 2.0 / (v * (v - 1)))


_RECORD_MEMBER_FNS = {
    "msp": lambda rec, stats, t: msp(rec.logits),
    "max_logit": lambda rec, stats, t: max_logit(rec.logits),
    "logit_norm": lambda rec, stats, t: logit_norm(rec.logits),
    "ebo": lambda rec, stats, t: energy(rec.logits, t),
    "doctor_alpha": lambda rec, stats, t: doctor_alpha(rec.logits),
    "odin": lambda rec, stats, t: odin(rec),
    "mds_f": lambda rec, stats, t: mds_layer(rec, stats.layers[stats.layer_names[0]]),
    "mds_l": lambda rec, stats, t: mds_layer(rec, stats.layers[stats.layer_names[-1]]),
    "mds_all": lambda rec, stats, t: mds_all(rec, stats),
    "react": lambda rec, stats, t: react_energy(rec, stats, t),
    "gradnorm": lambda rec, stats, t: gradnorm(rec, stats, t),
    "dice": lambda rec, stats, t: dice_energy(rec, stats, t),
    "vim": lambda rec, stats, t: vim(rec, stats),
    "cadet": lambda rec, stats, t: cadet_intra_similarity(rec),
}


def score_vector(
    record: SampleRecord,
    stats: FittedStats,
    ensemble: EnsembleDefinition,
    temperature: float = 1.0,
) -> ScoreVector:
    """Evaluate every ensemble member on one record, in declared order."""
    values = np.empty(len(ensemble.members))
    for i, member in enumerate(ensemble.members):
        try:
            values[i] = _RECORD_MEMBER_FNS[member](record, stats, temperature)
        except CapabilityError as exc:
            raise CapabilityError(f"{member}: {exc}") from exc
    if not np.isfinite(values).all():
        bad = ensemble.members[int(np.flatnonzero(~np.isfinite(values))[0])]
        raise DataError(f"non-finite score for member {bad!r} on sample {record.sample_id}")
    return ScoreVector(
        ensemble_id=ensemble.ensemble_id, values=values, sample_id=record.sample_id
    )


def _require(condition: bool, member: str, message: str) -> None:
    if not condition:
        raise CapabilityError(f"{member}: {message}")


def _batch_mds(bundle: DatasetBundle, layer: LayerGaussianStats) -> np.ndarray:
    x = np.asarray(bundle.features[layer.layer_name], dtype=np.float64)
    return _accel.mahalanobis_best(x, layer.class_means, layer.shared_precision)


def _batch_member(
    member: str, bundle: DatasetBundle, stats: FittedStats, temperature: float
) -> np.ndarray:
    logits = np.asarray(bundle.logits, dtype=np.float64)
    if member == "msp":
        return msp(logits)
    if member == "max_logit":
        return max_logit(logits)
    if member == "logit_norm":
        return logit_norm(logits)
    if member == "ebo":
        return energy(logits, temperature)
    if member == "doctor_alpha":
        return doctor_alpha(logits)
    if member == "odin":
        _require(bundle.odin_logits is not None, member, "dataset has no odin_logits channel")
        perturbed = np.asarray(bundle.odin_logits, dtype=np.float64)
        return msp(perturbed / ODIN_TEMPERATURE)
    if member in ("mds_f", "mds_l"):
        name = stats.layer_names[0] if member == "mds_f" else stats.layer_names[-1]
        _require(name in bundle.features, member, f"dataset lacks features for layer {name!r}")
        return _batch_mds(bundle, stats.layers[name])
    if member == "mds_all":
        for name in stats.layer_names:
            _require(name in bundle.features, member, f"dataset lacks features for layer {name!r}")
        per_layer = [_batch_mds(bundle, stats.layers[name]) for name in stats.layer_names]
        return np.mean(per_layer, axis=0)
    if member == "cadet":
        _require(bundle.view_features is not None, member, "dataset has no view_features channel")
        views = np.asarray(bundle.view_features, dtype=np.float64)
        n, v, _ = views.shape
        norms = np.linalg.norm(views, axis=2)
        safe = np.where(norms > 0.0, norms, 1.0)
        unit = views / safe[:, :, None]
        gram = np.einsum("nvd,nwd->nvw", unit, unit)
        iu, ju = np.triu_indices(v, k=1)
        return gram[:, iu, ju].sum(axis=1) * 2.0 / (v * (v - 1))
    penult_name = stats.head.penultimate_layer
    _require(
        penult_name in bundle.features, member, f"dataset lacks features for layer {penult_name!r}"
    )
    f = np.asarray(bundle.features[penult_name], dtype=np.float64)
    weight = np.asarray(stats.head.weight, dtype=np.float64)
    bias = np.asarray(stats.head.bias, dtype=np.float64)
    if member == "react":
        clipped = np.minimum(f, stats.react.clip_value)
        return energy(clipped @ weight.T + bias, temperature)
    if member == "gradnorm":
        probs = _softmax(logits / temperature)
        shifted = np.abs(probs - 1.0 / logits.shape[1]).sum(axis=1)
        return shifted * np.abs(f).sum(axis=1)
    if member == "dice":
        masked = weight * stats.dice.mask
        return energy(f @ masked.T + bias, temperature)
    if member == "vim":
        centered = f - stats.vim.offset
        basis = stats.vim.principal_basis
        residual = centered - (centered @ basis) @ basis.T
        return logsumexp(logits, axis=1) - stats.vim.alpha * np.linalg.norm(residual, axis=1)
    raise ValueError(f"unknown member score {member!r}")


def score_bundle(
    bundle: DatasetBundle,
    stats: FittedStats,
    members,
    temperature: float = 1.0,
) -> np.ndarray:
    """Vectorized member scores for a whole bundle.

    ``members`` is an EnsembleDefinition or an iterable of member names.
    Returns (N, K) float64 in member order. Capability errors name the
    offending member; a missing channel is never silently substituted.
    """
    if isinstance(members, EnsembleDefinition):
        members = members.members
    members = tuple(members)
    out = np.empty((len(bundle), len(members)))
    for j, member in enumerate(members):
        if member not in MEMBER_NAMES:
            raise ValueError(f"unknown member score {member!r}")
        out[:, j] = _batch_member(member, bundle, stats, temperature)
    if out.size and not np.isfinite(out).all():
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=0))[0])
        raise DataError(f"non-finite scores produced by member {members[bad]!r}")
    return out
