"""Pipeline configuration: one TOML file, validated before any work starts.

Paths are resolved relative to the config file's directory. CLI flags
(--seed, --jobs) override the corresponding keys.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .ingest import SHIFT_TYPES, DatasetManifest
from .scores import BUILTIN_ENSEMBLES, MEMBER_NAMES, EnsembleDefinition


@dataclass(frozen=True)
class PipelineConfig:
    root: Path
    output_dir: Path
    id_train: str
    id_val: str
    ood_datasets: dict[str, str]  # dataset_id -> declared shift_type
    ensembles: tuple[str, ...] = ("Ens-F",)
    custom_ensembles: dict[str, tuple[str, ...]] = field(default_factory=dict)
    candidates: tuple[int, ...] = (1, 2, 5, 10, 20)
    validation_fraction: float = 0.2
    corr_threshold: float = 0.95
    seed: int = 0
    gmm_tol: float = 1e-6
    gmm_reg: float = 1e-6
    gmm_restarts: int = 3
    gmm_max_iter: int = 500
    temperature: float = 1.0
    dice_keep_fraction: float = 0.7
    react_percentile: float = 90.0
    vim_dim: int | None = None
    lambda_scale: float = 1e-6
    scorers: tuple[str, ...] = ()
    timing_baseline: float = 0.0
    config_hash: str = ""

    def ensemble_definitions(self) -> dict[str, EnsembleDefinition]:
        defs = {}
        for ens_id in self.ensembles:
            if ens_id in BUILTIN_ENSEMBLES:
                defs[ens_id] = BUILTIN_ENSEMBLES[ens_id]
            elif ens_id in self.custom_ensembles:
                defs[ens_id] = EnsembleDefinition(ens_id, self.custom_ensembles[ens_id])
            else:
                raise ConfigError(f"unknown ensemble id {ens_id!r}")
        return defs

    def effective_scorers(self) -> tuple[str, ...]:
        """Explicit scorers if configured, else ensemble members + ensembles."""
        if self.scorers:
            return self.scorers
        defs = self.ensemble_definitions()
        members = {m for d in defs.values() for m in d.members}
        ordered = tuple(m for m in MEMBER_NAMES if m in members)
        return ordered + tuple(defs.keys())


def _positive(value, name, kind=float):
    value = kind(value)
    if value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def load_config(path: str | Path, seed_override: int | None = None) -> PipelineConfig:
    """Parse and range-check a TOML pipeline configuration."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    config_hash = hashlib.sha256(path.read_bytes()).hexdigest()

    base = path.parent
    try:
        datasets = raw["datasets"]
        id_train = str(datasets["id_train"])
        id_val = str(datasets["id_val"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required key {exc}") from exc
    ood = {str(k): str(v) for k, v in datasets.get("ood", {}).items()}
    for dataset_id, shift in ood.items():
        if shift not in SHIFT_TYPES or shift == "in_distribution":
            raise ConfigError(
                f"dataset {dataset_id!r}: invalid OOD shift_type {shift!r}"
            )

    ens = raw.get("ensemble", {})
    gmm = raw.get("gmm", {})
    det = raw.get("detectors", {})
    ev = raw.get("evaluate", {})

    custom = {
        str(name): tuple(str(m) for m in members)
        for name, members in ens.get("custom", {}).items()
    }
    for name, members in custom.items():
        EnsembleDefinition(name, members)  # raises ValueError on bad members

    candidates = tuple(int(c) for c in ens.get("candidates", (1, 2, 5, 10, 20)))
    if not candidates or any(c < 1 for c in candidates):
        raise ConfigError(f"invalid component candidates {candidates}")

    validation_fraction = float(ens.get("validation_fraction", 0.2))
    if not 0.0 < validation_fraction < 1.0:
        raise ConfigError(
            f"validation_fraction must be in (0, 1), got {validation_fraction}"
        )
    corr_threshold = float(ens.get("corr_threshold", 0.95))
    if not 0.0 < corr_threshold <= 1.0:
        raise ConfigError(f"corr_threshold must be in (0, 1], got {corr_threshold}")

    dice_p = float(det.get("dice_keep_fraction", 0.7))
    if not 0.0 < dice_p <= 1.0:
        raise ConfigError(f"dice_keep_fraction must be in (0, 1], got {dice_p}")
    react_q = float(det.get("react_percentile", 90.0))
    if not 0.0 < react_q <= 100.0:
        raise ConfigError(f"react_percentile must be in (0, 100], got {react_q}")
    vim_dim = int(det.get("vim_dim", 0)) or None

    scorers = tuple(str(s) for s in ev.get("scorers", ()))

    seed = int(raw.get("seed", 0))
    if seed_override is not None:
        seed = int(seed_override)

    try:
        config = PipelineConfig(
            root=(base / str(raw.get("root", "."))).resolve(),
            output_dir=(base / str(raw.get("output_dir", "out"))).resolve(),
            id_train=id_train,
            id_val=id_val,
            ood_datasets=ood,
            ensembles=tuple(str(e) for e in ens.get("ids", ("Ens-F",))),
            custom_ensembles=custom,
            candidates=candidates,
            validation_fraction=validation_fraction,
            corr_threshold=corr_threshold,
            seed=seed,
            gmm_tol=_positive(gmm.get("tol", 1e-6), "gmm.tol"),
            gmm_reg=_positive(gmm.get("reg", 1e-6), "gmm.reg"),
            gmm_restarts=_positive(gmm.get("restarts", 3), "gmm.restarts", int),
            gmm_max_iter=_positive(gmm.get("max_iter", 500), "gmm.max_iter", int),
            temperature=_positive(det.get("temperature", 1.0), "detectors.temperature"),
            dice_keep_fraction=dice_p,
            react_percentile=react_q,
            vim_dim=vim_dim,
            lambda_scale=float(det.get("lambda_scale", 1e-6)),
            scorers=scorers,
            timing_baseline=float(ev.get("timing_baseline", 0.0)),
            config_hash=config_hash,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    config.ensemble_definitions()  # validates ensemble ids and members
    return config


def validate_datasets(config: PipelineConfig) -> dict[str, DatasetManifest]:
    """Check every referenced dataset exists with a consistent manifest.

    Runs before any array is loaded, so configuration mistakes surface
    before expensive work.
    """
    manifests = {}
    wanted = {config.id_train: "in_distribution", config.id_val: "in_distribution"}
    wanted.update(config.ood_datasets)
    for dataset_id, expected_shift in wanted.items():
        manifest_path = config.root / dataset_id / "manifest.json"
        if not manifest_path.is_file():
            raise ConfigError(f"dataset {dataset_id!r} not found under {config.root}")
        manifest = DatasetManifest.from_json_dict(
            json.loads(manifest_path.read_text(encoding="utf-8"))
        )
        if manifest.shift_type != expected_shift:
            raise ConfigError(
                f"dataset {dataset_id!r}: manifest shift_type "
                f"{manifest.shift_type!r} != configured {expected_shift!r}"
            )
        manifests[dataset_id] = manifest
    if not (config.root / "model.json").is_file():
        raise ConfigError(f"model.json not found under {config.root}")
    return manifests


def with_seed(config: PipelineConfig, seed: int | None) -> PipelineConfig:
    if seed is None:
        return config
    return replace(config, seed=int(seed))
