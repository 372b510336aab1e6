"""In-distribution statistics the detectors depend on.

Everything here is fitted once from an ID training bundle: per-layer
class-conditional Gaussians with a tied covariance, the principal
subspace and residual scale used by the virtual-logit score, the
per-class weight masks for sparsified energy, and the activation
clipping threshold. All math runs in float64 regardless of the float32
storage dtype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FitError, FormatError, NumericalError
from .ingest import DatasetBundle, ModelHead


@dataclass(frozen=True)
class LayerGaussianStats:
    """Class means plus the shared (tied-covariance) precision matrix."""

    layer_name: str
    class_means: np.ndarray  # (C, D) float64
    shared_precision: np.ndarray  # (D, D) float64, symmetric positive-definite
    regularization: float  # ridge actually added to the covariance diagonal


@dataclass(frozen=True)
class VimStats:
    """Principal subspace of offset features and the residual scale alpha."""

    offset: np.ndarray  # (D,) float64, u = -pinv(W) b
    principal_basis: np.ndarray  # (D, D') float64, orthonormal columns
    alpha: float
    principal_dim: int


@dataclass(frozen=True)
class DiceMask:
    """Per-class boolean mask keeping the top-contribution weight columns."""

    mask: np.ndarray  # (C, D) bool
    keep_fraction: float


@dataclass(frozen=True)
class ReactThreshold:
    """Elementwise activation clip value from a training percentile."""

    clip_value: float
    percentile: float


@dataclass(frozen=True)
class FittedStats:
    """Everything the scores module needs, fitted from ID training data."""

    layers: dict[str, LayerGaussianStats]  # insertion order = layer order
    vim: VimStats
    dice: DiceMask
    react: ReactThreshold
    head: ModelHead
    meta: dict

    @property
    def layer_names(self) -> tuple[str, ...]:
        return tuple(self.layers.keys())


def _cholesky_inverse(matrix: np.ndarray) -> np.ndarray:
    """Invert an SPD matrix through its Cholesky factor; symmetrized result."""
    try:
        lower = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Cholesky factorization failed: {exc}") from exc
    lower_inv = solve_triangular(lower, np.eye(matrix.shape[0]), lower=True)
    inverse = lower_inv.T @ lower_inv
    return 0.5 * (inverse + inverse.T)


def fit_class_gaussians(
    features: np.ndarray,
    labels: np.ndarray,
    lambda_scale: float = 1e-6,
    class_count: int | None = None,
    layer_name: str = "",
) -> LayerGaussianStats:
    """Fit per-class means and a tied, ridge-regularized precision.

    The shared covariance pools squared deviations from each sample's own
    class mean with the biased 1/N normalizer. The ridge is
    ``lambda_scale * trace(cov) / D`` so that inversion succeeds even for
    N <= D dumps.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n, d = x.shape
    c = int(class_count) if class_count is not None else int(labels.max()) + 1
    means = np.empty((c, d))
    for k in range(c):
        rows = x[labels == k]
        if rows.shape[0] == 0:
            raise FitError(f"class {k} has no samples{' in ' + layer_name if layer_name else ''}")
        means[k] = rows.mean(axis=0)
    centered = x - means[labels]
    cov = centered.T @ centered / n
    trace = float(np.trace(cov))
    # zero-scatter input (every sample at its class mean) falls back to an
    # absolute ridge so the precision stays finite
    lam = float(lambda_scale) * (trace / d if trace > 0.0 else 1.0)
    precision = _cholesky_inverse(cov + lam * np.eye(d))
    return LayerGaussianStats(
        layer_name=layer_name,
        class_means=means,
        shared_precision=precision,
        regularization=lam,
    )


def fit_vim_subspace(
    penult_features: np.ndarray, head: ModelHead, principal_dim: int
) -> VimStats:
    """Fit the principal subspace of offset features and the alpha scale.

    The offset u minimizes ||W u + b|| (least squares via pseudo-inverse);
    the basis spans the top-``principal_dim`` eigenvectors of the second
    moment of f - u (moments taken about the offset origin, the
    convention of the virtual-logit method); alpha is the ratio of the
    mean training max-logit to the mean training residual norm.
    """
    x = np.asarray(penult_features, dtype=np.float64)
    n, d = x.shape
    if not 0 < principal_dim < d:
        raise ValueError(f"principal_dim must be in (0, {d}), got {principal_dim}")
    if n <= principal_dim:
        raise ValueError(f"need more than {principal_dim} samples, got {n}")
    weight = np.asarray(head.weight, dtype=np.float64)
    bias = np.asarray(head.bias, dtype=np.float64)
    offset = -np.linalg.pinv(weight) @ bias
    centered = x - offset
    moment = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(moment)
    tol = max(eigvals[-1], 0.0) * d * np.finfo(np.float64).eps
    rank = int(np.count_nonzero(eigvals > tol))
    if rank < principal_dim:
        raise FitError(
            f"feature second moment has rank {rank} < requested principal_dim {principal_dim}"
        )
    basis = eigvecs[:, ::-1][:, :principal_dim]
    residual = centered - (centered @ basis) @ basis.T
    residual_norms = np.linalg.norm(residual, axis=1)
    mean_residual = float(residual_norms.mean())
    scale = float(np.linalg.norm(centered, axis=1).mean())
    if mean_residual <= 1e-9 * max(scale, 1.0):
        raise FitError(
            "training residual norms are degenerate (features lie inside the "
            "principal subspace); cannot calibrate alpha"
        )
    logits = x @ weight.T + bias
    alpha = float(logits.max(axis=1).mean()) / mean_residual
    if alpha <= 0.0:
        raise FitError(
            f"alpha = {alpha:.3g} <= 0: mean training max-logit is not positive, "
            "the residual scale cannot be calibrated"
        )
    return VimStats(
        offset=offset,
        principal_basis=basis,
        alpha=alpha,
        principal_dim=int(principal_dim),
    )


def fit_dice_masks(
    penult_features: np.ndarray, head: ModelHead, keep_fraction: float
) -> DiceMask:
    """Keep, per class row, the ceil(p*D) largest-contribution weights.

    Contribution of weight (c, j) is w_cj * mean_i f_ij. Ties break
    toward the lower column index.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    x = np.asarray(penult_features, dtype=np.float64)
    weight = np.asarray(head.weight, dtype=np.float64)
    c, d = weight.shape
    contribution = weight * x.mean(axis=0)[None, :]
    keep = int(np.ceil(keep_fraction * d))
    mask = np.zeros((c, d), dtype=bool)
    order = np.argsort(-contribution, axis=1, kind="stable")
    rows = np.repeat(np.arange(c), keep)
    mask[rows, order[:, :keep].ravel()] = True
    return DiceMask(mask=mask, keep_fraction=float(keep_fraction))


def fit_react_threshold(penult_features: np.ndarray, percentile: float) -> ReactThreshold:
    """Clip value = the given percentile of all flattened training activations."""
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    x = np.asarray(penult_features, dtype=np.float64)
    if x.size == 0:
        raise FitError("cannot fit a clipping threshold on empty input")
    clip = float(np.percentile(x.ravel(), percentile))
    return ReactThreshold(clip_value=clip, percentile=float(percentile))


def fit_stats(
    bundle: DatasetBundle,
    head: ModelHead,
    lambda_scale: float = 1e-6,
    vim_dim: int | None = None,
    dice_keep_fraction: float = 0.7,
    react_percentile: float = 90.0,
    seed: int = 0,
) -> FittedStats:
    """Fit every detector statistic from one ID training bundle.

    ``vim_dim=None`` selects min(512, D // 2) for the penultimate width D.
    """
    if head.penultimate_layer not in bundle.features:
        raise FormatError(
            f"head references layer {head.penultimate_layer!r} absent from "
            f"{bundle.dataset_id}"
        )
    penult = np.asarray(bundle.features[head.penultimate_layer], dtype=np.float64)
    if head.weight.shape[1] != penult.shape[1]:
        raise FormatError(
            f"head weight width {head.weight.shape[1]} != penultimate feature "
            f"width {penult.shape[1]}"
        )
    c = bundle.manifest.class_count
    if head.weight.shape[0] != c:
        raise FormatError(
            f"head weight rows {head.weight.shape[0]} != class_count {c}"
        )
    layers = {}
    for layer in bundle.manifest.layer_names:
        layers[layer] = fit_class_gaussians(
            bundle.features[layer],
            bundle.labels,
            lambda_scale=lambda_scale,
            class_count=c,
            layer_name=layer,
        )
    if vim_dim is None:
        vim_dim = min(512, penult.shape[1] // 2)
    vim = fit_vim_subspace(penult, head, vim_dim)
    dice = fit_dice_masks(penult, head, dice_keep_fraction)
    react = fit_react_threshold(penult, react_percentile)
    meta = {
        "train_dataset": bundle.dataset_id,
        "sample_count": len(bundle),
        "lambda_scale": float(lambda_scale),
        "dice_keep_fraction": float(dice_keep_fraction),
        "react_percentile": float(react_percentile),
        "vim_dim": int(vim_dim),
        "seed": int(seed),
    }
    return FittedStats(layers=layers, vim=vim, dice=dice, react=react, head=head, meta=meta)


def save_stats(stats: FittedStats, directory: str | Path) -> Path:
    """Serialize to ``stats.json`` plus NPY arrays; reload is bit-exact."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "layer_names": list(stats.layer_names),
        "layer_regularization": {
            name: layer.regularization for name, layer in stats.layers.items()
        },
        "vim_alpha": stats.vim.alpha,
        "vim_dim": stats.vim.principal_dim,
        "dice_keep_fraction": stats.dice.keep_fraction,
        "react_clip_value": stats.react.clip_value,
        "react_percentile": stats.react.percentile,
        "penultimate_layer": stats.head.penultimate_layer,
        "fit": stats.meta,
    }
    (directory / "stats.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    for name, layer in stats.layers.items():
        np.save(directory / f"gauss_{name}_means.npy", layer.class_means)
        np.save(directory / f"gauss_{name}_precision.npy", layer.shared_precision)
    np.save(directory / "vim_offset.npy", stats.vim.offset)
    np.save(directory / "vim_basis.npy", stats.vim.principal_basis)
    np.save(directory / "dice_mask.npy", stats.dice.mask)
    np.save(directory / "head_weight.npy", stats.head.weight)
    np.save(directory / "head_bias.npy", stats.head.bias)
    return directory


def load_stats(directory: str | Path) -> FittedStats:
    directory = Path(directory)
    meta_path = directory / "stats.json"
    if not meta_path.is_file():
        raise FormatError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    layers = {}
    for name in meta["layer_names"]:
        layers[name] = LayerGaussianStats(
            layer_name=name,
            class_means=np.load(directory / f"gauss_{name}_means.npy"),
            shared_precision=np.load(directory / f"gauss_{name}_precision.npy"),
            regularization=float(meta["layer_regularization"][name]),
        )
    head = ModelHead(
        weight=np.load(directory / "head_weight.npy"),
        bias=np.load(directory / "head_bias.npy"),
        penultimate_layer=meta["penultimate_layer"],
    )
    vim = VimStats(
        offset=np.load(directory / "vim_offset.npy"),
        principal_basis=np.load(directory / "vim_basis.npy"),
        alpha=float(meta["vim_alpha"]),
        principal_dim=int(meta["vim_dim"]),
    )
    dice = DiceMask(
        mask=np.load(directory / "dice_mask.npy"),
        keep_fraction=float(meta["dice_keep_fraction"]),
    )
    react = ReactThreshold(
        clip_value=float(meta["react_clip_value"]),
        percentile=float(meta["react_percentile"]),
    )
    return FittedStats(
        layers=layers, vim=vim, dice=dice, react=react, head=head, meta=meta["fit"]
    )
