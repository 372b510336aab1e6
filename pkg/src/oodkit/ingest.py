"""On-disk dataset containers: manifests, sample records, bundles.

A dataset is one directory holding a ``manifest.json`` plus one NPY array
file per field (float32 for features/logits, int64 for ids/labels/
predictions, little-endian throughout). The classifier head lives at the
tree root as ``model.json`` + ``head_weight.npy``/``head_bias.npy``.

Loading is strict: every invariant the downstream scoring relies on is
checked here, including recomputing ``argmax(logits)`` and failing on any
disagreement with the stored predictions. Bundles are immutable after
load and safe to share across workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, LinkageError

FLOAT_DTYPE = np.dtype("<f4")
INT_DTYPE = np.dtype("<i8")

SHIFT_TYPES = (
    "in_distribution",
    "novel_classes",
    "adversarial",
    "synthetic",
    "corruption",
    "multi_label",
)


@dataclass(frozen=True)
class DatasetManifest:
    """Metadata for one dataset directory."""

    dataset_id: str
    shift_type: str
    record_count: int
    layer_names: tuple[str, ...]
    class_count: int
    has_aux_odin: bool = False
    has_aux_views: bool = False
    view_count: int = 0
    origin_dataset_id: str | None = None
    label_restriction: frozenset[int] | None = None

    def validate(self) -> None:
        if self.shift_type not in SHIFT_TYPES:
            raise FormatError(
                f"{self.dataset_id}: unknown shift_type {self.shift_type!r}; "
                f"expected one of {SHIFT_TYPES}"
            )
        if self.record_count < 0:
            raise FormatError(f"{self.dataset_id}: negative record_count")
        if not self.layer_names:
            raise FormatError(f"{self.dataset_id}: layer_names must be nonempty")
        if self.class_count < 1:
            raise FormatError(f"{self.dataset_id}: class_count must be positive")
        if self.has_aux_views and self.view_count < 2:
            raise FormatError(
                f"{self.dataset_id}: view_count must be >= 2 when has_aux_views"
            )
        has_origin = self.origin_dataset_id is not None
        if has_origin != (self.shift_type == "adversarial"):
            raise FormatError(
                f"{self.dataset_id}: origin_dataset_id must be present exactly "
                f"for adversarial datasets (shift_type={self.shift_type})"
            )

    def to_json_dict(self) -> dict:
        out = {
            "dataset_id": self.dataset_id,
            "shift_type": self.shift_type,
            "record_count": self.record_count,
            "layer_names": list(self.layer_names),
            "class_count": self.class_count,
            "has_aux_odin": self.has_aux_odin,
            "has_aux_views": self.has_aux_views,
            "view_count": self.view_count,
            "origin_dataset_id": self.origin_dataset_id,
            "label_restriction": (
                sorted(self.label_restriction) if self.label_restriction is not None else None
            ),
        }
        return out

    @classmethod
    def from_json_dict(cls, raw: dict) -> "DatasetManifest":
        try:
            restriction = raw.get("label_restriction")
            manifest = cls(
                dataset_id=str(raw["dataset_id"]),
                shift_type=str(raw["shift_type"]),
                record_count=int(raw["record_count"]),
                layer_names=tuple(str(n) for n in raw["layer_names"]),
                class_count=int(raw["class_count"]),
                has_aux_odin=bool(raw.get("has_aux_odin", False)),
                has_aux_views=bool(raw.get("has_aux_views", False)),
                view_count=int(raw.get("view_count", 0)),
                origin_dataset_id=raw.get("origin_dataset_id"),
                label_restriction=(
                    frozenset(int(c) for c in restriction) if restriction is not None else None
                ),
            )
        except KeyError as exc:
            raise FormatError(f"manifest missing required key {exc}") from exc
        manifest.validate()
        return manifest


@dataclass(frozen=True)
class SampleRecord:
    """Per-sample view into a bundle. Arrays are read-only slices."""

    sample_id: int
    label: int
    prediction: int
    logits: np.ndarray
    features: dict[str, np.ndarray]
    origin_id: int | None = None
    odin_logits: np.ndarray | None = None
    view_features: np.ndarray | None = None


@dataclass(frozen=True)
class ModelHead:
    """Final linear classifier: logits = weight @ f + bias."""

    weight: np.ndarray  # (C, D_penultimate)
    bias: np.ndarray  # (C,)
    penultimate_layer: str


@dataclass(frozen=True)
class DatasetBundle:
    """A fully materialized dataset: manifest plus column arrays."""

    manifest: DatasetManifest
    logits: np.ndarray  # (N, C) float32
    labels: np.ndarray  # (N,) int64, -1 = unknown
    predictions: np.ndarray  # (N,) int64
    sample_ids: np.ndarray  # (N,) int64
    features: dict[str, np.ndarray]  # layer -> (N, D_layer) float32
    origin_ids: np.ndarray | None = None  # (N,) int64, adversarial only
    odin_logits: np.ndarray | None = None  # (N, C) float32
    view_features: np.ndarray | None = None  # (N, V, D) float32
    warnings: tuple[str, ...] = field(default=())

    def __len__(self) -> int:
        return self.manifest.record_count

    @property
    def dataset_id(self) -> str:
        return self.manifest.dataset_id

    @property
    def shift_type(self) -> str:
        return self.manifest.shift_type

    def record(self, index: int) -> SampleRecord:
        return SampleRecord(
            sample_id=int(self.sample_ids[index]),
            label=int(self.labels[index]),
            prediction=int(self.predictions[index]),
            logits=self.logits[index],
            features={name: arr[index] for name, arr in self.features.items()},
            origin_id=int(self.origin_ids[index]) if self.origin_ids is not None else None,
            odin_logits=self.odin_logits[index] if self.odin_logits is not None else None,
            view_features=(
                self.view_features[index] if self.view_features is not None else None
            ),
        )

    def records(self):
        for i in range(len(self)):
            yield self.record(i)


@dataclass(frozen=True)
class PairedBundle:
    """Attacked records joined to their clean counterparts.

    ``clean_indices[i]`` is the row in ``clean`` whose sample_id equals
    ``ood.origin_ids[i]``; ``successful_attack[i]`` is true when the clean
    prediction was correct and the attacked prediction is not.
    """

    ood: DatasetBundle
    clean: DatasetBundle
    clean_indices: np.ndarray  # (N_ood,) int64
    successful_attack: np.ndarray  # (N_ood,) bool

    def __len__(self) -> int:
        return len(self.ood)


def _expected_files(manifest: DatasetManifest) -> list[str]:
    names = ["logits.npy", "labels.npy", "predictions.npy", "sample_ids.npy"]
    names += [f"features_{layer}.npy" for layer in manifest.layer_names]
    if manifest.shift_type == "adversarial":
        names.append("origin_ids.npy")
    if manifest.has_aux_odin:
        names.append("odin_logits.npy")
    if manifest.has_aux_views:
        names.append("view_features.npy")
    return names


def _load_array(path: Path, dtype: np.dtype, shape: tuple, what: str) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"missing array file: {path}")
    arr = np.load(path)
    if arr.dtype != dtype:
        raise FormatError(f"{path.name}: dtype {arr.dtype} != expected {dtype}")
    if arr.shape != shape and None not in shape:
        raise FormatError(f"{path.name} ({what}): shape {arr.shape} != expected {shape}")
    if None in shape:
        fixed = tuple(e for e in shape if e is not None)
        if arr.ndim != len(shape) or arr.shape[: len(fixed)] != fixed:
            raise FormatError(
                f"{path.name} ({what}): shape {arr.shape} incompatible with expected {shape}"
            )
    return arr


def _check_finite(arr: np.ndarray, name: str) -> None:
    finite = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DataError(f"{name}: non-finite value at sample {bad}")


def load_dataset(root_path: str | Path, dataset_id: str) -> DatasetBundle:
    """Load and validate one dataset directory under ``root_path``.

    Raises FormatError for missing files or shape/dtype mismatches, and
    DataError for non-finite values, out-of-range labels, duplicate
    sample ids, or stored predictions disagreeing with argmax(logits).
    """
    ddir = Path(root_path) / dataset_id
    if not ddir.is_dir():
        raise FormatError(f"dataset directory does not exist: {ddir}")
    manifest_path = ddir / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"missing file: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    manifest = DatasetManifest.from_json_dict(raw)
    if manifest.dataset_id != dataset_id:
        raise FormatError(
            f"manifest dataset_id {manifest.dataset_id!r} != directory {dataset_id!r}"
        )

    n, c = manifest.record_count, manifest.class_count
    logits = _load_array(ddir / "logits.npy", FLOAT_DTYPE, (n, c), "logits")
    labels = _load_array(ddir / "labels.npy", INT_DTYPE, (n,), "labels")
    predictions = _load_array(ddir / "predictions.npy", INT_DTYPE, (n,), "predictions")
    sample_ids = _load_array(ddir / "sample_ids.npy", INT_DTYPE, (n,), "sample_ids")
    features = {}
    for layer in manifest.layer_names:
        arr = _load_array(ddir / f"features_{layer}.npy", FLOAT_DTYPE, (n, None), layer)
        features[layer] = arr
    origin_ids = None
    if manifest.shift_type == "adversarial":
        origin_ids = _load_array(ddir / "origin_ids.npy", INT_DTYPE, (n,), "origin_ids")
    odin_logits = None
    if manifest.has_aux_odin:
        odin_logits = _load_array(ddir / "odin_logits.npy", FLOAT_DTYPE, (n, c), "odin_logits")
    view_features = None
    if manifest.has_aux_views:
        view_features = _load_array(
            ddir / "view_features.npy",
            FLOAT_DTYPE,
            (n, manifest.view_count, None),
            "view_features",
        )

    if n > 0:
        _check_finite(logits, "logits")
        for layer, arr in features.items():
            _check_finite(arr, f"features_{layer}")
        if odin_logits is not None:
            _check_finite(odin_logits, "odin_logits")
        if view_features is not None:
            _check_finite(view_features, "view_features")

        if labels.min() < -1 or labels.max() >= c:
            bad = int(np.flatnonzero((labels < -1) | (labels >= c))[0])
            raise DataError(f"labels: value {labels[bad]} out of range at sample {bad}")
        if predictions.min() < 0 or predictions.max() >= c:
            bad = int(np.flatnonzero((predictions < 0) | (predictions >= c))[0])
            raise DataError(
                f"predictions: value {predictions[bad]} out of range at sample {bad}"
            )
        if np.unique(sample_ids).size != n:
            raise DataError(f"{dataset_id}: sample_ids are not unique")

        recomputed = np.argmax(logits, axis=1)
        if not np.array_equal(recomputed, predictions):
            bad = int(np.flatnonzero(recomputed != predictions)[0])
            raise DataError(
                f"stored prediction {predictions[bad]} disagrees with argmax(logits)="
                f"{recomputed[bad]} at sample {bad}"
            )

    return DatasetBundle(
        manifest=manifest,
        logits=logits,
        labels=labels,
        predictions=predictions,
        sample_ids=sample_ids,
        features=features,
        origin_ids=origin_ids,
        odin_logits=odin_logits,
        view_features=view_features,
    )


def write_bundle(bundle: DatasetBundle, root_path: str | Path) -> Path:
    """Write a bundle to ``root_path/<dataset_id>/``; returns that directory."""
    ddir = Path(root_path) / bundle.dataset_id
    ddir.mkdir(parents=True, exist_ok=True)
    manifest_json = json.dumps(bundle.manifest.to_json_dict(), indent=2, sort_keys=True)
    (ddir / "manifest.json").write_text(manifest_json + "\n", encoding="utf-8")
    np.save(ddir / "logits.npy", np.ascontiguousarray(bundle.logits, dtype=FLOAT_DTYPE))
    np.save(ddir / "labels.npy", np.ascontiguousarray(bundle.labels, dtype=INT_DTYPE))
    np.save(ddir / "predictions.npy", np.ascontiguousarray(bundle.predictions, dtype=INT_DTYPE))
    np.save(ddir / "sample_ids.npy", np.ascontiguousarray(bundle.sample_ids, dtype=INT_DTYPE))
    for layer, arr in bundle.features.items():
        np.save(ddir / f"features_{layer}.npy", np.ascontiguousarray(arr, dtype=FLOAT_DTYPE))
    if bundle.origin_ids is not None:
        np.save(ddir / "origin_ids.npy", np.ascontiguousarray(bundle.origin_ids, dtype=INT_DTYPE))
    if bundle.odin_logits is not None:
        np.save(ddir / "odin_logits.npy", np.ascontiguousarray(bundle.odin_logits, dtype=FLOAT_DTYPE))
    if bundle.view_features is not None:
        np.save(
            ddir / "view_features.npy",
            np.ascontiguousarray(bundle.view_features, dtype=FLOAT_DTYPE),
        )
    return ddir


def load_model_head(root_path: str | Path) -> ModelHead:
    root = Path(root_path)
    meta_path = root / "model.json"
    if not meta_path.is_file():
        raise FormatError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        penult = str(meta["penultimate_layer"])
    except KeyError as exc:
        raise FormatError(f"{meta_path}: missing key {exc}") from exc
    weight_path = root / "head_weight.npy"
    bias_path = root / "head_bias.npy"
    if not weight_path.is_file():
        raise FormatError(f"missing file: {weight_path}")
    if not bias_path.is_file():
        raise FormatError(f"missing file: {bias_path}")
    weight = np.load(weight_path)
    bias = np.load(bias_path)
    if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
        raise FormatError(
            f"head shapes inconsistent: weight {weight.shape}, bias {bias.shape}"
        )
    return ModelHead(weight=weight, bias=bias, penultimate_layer=penult)


def write_model_head(head: ModelHead, root_path: str | Path) -> None:
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"penultimate_layer": head.penultimate_layer}
    (root / "model.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    np.save(root / "head_weight.npy", np.ascontiguousarray(head.weight, dtype=FLOAT_DTYPE))
    np.save(root / "head_bias.npy", np.ascontiguousarray(head.bias, dtype=FLOAT_DTYPE))


def take(bundle: DatasetBundle, indices: np.ndarray) -> DatasetBundle:
    """Row-subset of a bundle, preserving order of ``indices``."""
    indices = np.asarray(indices)
    manifest = replace(bundle.manifest, record_count=int(indices.size))
    return DatasetBundle(
        manifest=manifest,
        logits=bundle.logits[indices],
        labels=bundle.labels[indices],
        predictions=bundle.predictions[indices],
        sample_ids=bundle.sample_ids[indices],
        features={layer: arr[indices] for layer, arr in bundle.features.items()},
        origin_ids=bundle.origin_ids[indices] if bundle.origin_ids is not None else None,
        odin_logits=bundle.odin_logits[indices] if bundle.odin_logits is not None else None,
        view_features=(
            bundle.view_features[indices] if bundle.view_features is not None else None
        ),
        warnings=bundle.warnings,
    )


def link_counterparts(ood_bundle: DatasetBundle, clean_bundle: DatasetBundle) -> PairedBundle:
    """Join every attacked record to its clean origin.

    Total on valid inputs: the number of pairs equals the attacked
    bundle's record count. A pair is flagged ``successful_attack`` when
    the clean prediction matched the label and the attacked prediction
    does not.
    """
    if ood_bundle.shift_type != "adversarial":
        raise DataError(
            f"{ood_bundle.dataset_id}: link_counterparts requires an adversarial bundle"
        )
    if ood_bundle.manifest.origin_dataset_id != clean_bundle.dataset_id:
        raise LinkageError(
            f"{ood_bundle.dataset_id} names origin "
            f"{ood_bundle.manifest.origin_dataset_id!r}, got {clean_bundle.dataset_id!r}"
        )
    id_to_index = {int(sid): i for i, sid in enumerate(clean_bundle.sample_ids)}
    clean_indices = np.empty(len(ood_bundle), dtype=np.int64)
    for i, origin in enumerate(ood_bundle.origin_ids):
        j = id_to_index.get(int(origin))
        if j is None:
            raise LinkageError(
                f"{ood_bundle.dataset_id}: sample "
                f"{int(ood_bundle.sample_ids[i])} has dangling origin_id {int(origin)}"
            )
        clean_indices[i] = j
    clean_labels = clean_bundle.labels[clean_indices]
    clean_preds = clean_bundle.predictions[clean_indices]
    flagged = (clean_preds == clean_labels) & (ood_bundle.predictions != clean_labels)
    return PairedBundle(
        ood=ood_bundle,
        clean=clean_bundle,
        clean_indices=clean_indices,
        successful_attack=flagged,
    )


def restrict_by_labels(bundle: DatasetBundle, classes: frozenset[int] | set[int]) -> DatasetBundle:
    """Keep only records whose label is in ``classes``.

    An empty result is not an error here; the bundle carries a warning
    and the evaluation layer rejects it if used.
    """
    if not classes:
        raise ValueError("classes must be nonempty")
    mask = np.isin(bundle.labels, sorted(classes))
    kept = np.flatnonzero(mask)
    restricted = take(bundle, kept)
    if kept.size == 0:
        restricted = replace(
            restricted,
            warnings=restricted.warnings
            + (f"{bundle.dataset_id}: label restriction left no records",),
        )
    return restricted
