"""Deterministic synthetic dataset trees for demos and end-to-end tests.

Builds a small classifier world: class means in penultimate space, a
nearest-mean linear head (W rows are the class means, biases -|mu|^2/2),
and feature clouds around the means. Every dataset carries both
auxiliary channels so all fourteen scores can run. The tree is entirely
seed-determined.

Run ``python -m oodkit.synthetic <dir>`` to materialize a tree plus a
ready-to-use ``config.toml``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .ingest import (
    FLOAT_DTYPE,
    INT_DTYPE,
    DatasetBundle,
    DatasetManifest,
    ModelHead,
    write_bundle,
    write_model_head,
)

CLASS_COUNT = 5
PENULT_DIM = 12
FIRST_DIM = 8
VIEW_COUNT = 5
LAYERS = ("block1", "penult")


def _head_and_means(rng: np.random.Generator):
    penult_means = rng.normal(scale=1.2, size=(CLASS_COUNT, PENULT_DIM))
    first_means = rng.normal(scale=0.8, size=(CLASS_COUNT, FIRST_DIM))
    weight = penult_means.copy()
    bias = -0.5 * (penult_means**2).sum(axis=1)
    head = ModelHead(
        weight=weight.astype(FLOAT_DTYPE),
        bias=bias.astype(FLOAT_DTYPE),
        penultimate_layer="penult",
    )
    return head, penult_means, first_means


def _assemble(
    dataset_id: str,
    shift_type: str,
    penult: np.ndarray,
    block1: np.ndarray,
    labels: np.ndarray,
    sample_ids: np.ndarray,
    head: ModelHead,
    rng: np.random.Generator,
    origin_dataset_id: str | None = None,
    origin_ids: np.ndarray | None = None,
    label_restriction=None,
) -> DatasetBundle:
    n = penult.shape[0]
    weight = np.asarray(head.weight, dtype=np.float64)
    bias = np.asarray(head.bias, dtype=np.float64)
    logits = (penult @ weight.T + bias).astype(FLOAT_DTYPE)
    predictions = np.argmax(logits, axis=1).astype(INT_DTYPE)
    # Upstream ODIN perturbation emulated as a confidence boost toward the
    # predicted class; only its shape/finiteness matter to the pipeline.
    onehot = np.zeros((n, CLASS_COUNT))
    onehot[np.arange(n), predictions] = 1.0
    odin_logits = (
        logits.astype(np.float64) + 0.3 * onehot + rng.normal(scale=0.01, size=(n, CLASS_COUNT))
    ).astype(FLOAT_DTYPE)
    views = (
        penult[:, None, :] + rng.normal(scale=0.15, size=(n, VIEW_COUNT, PENULT_DIM))
    ).astype(FLOAT_DTYPE)
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        shift_type=shift_type,
        record_count=n,
        layer_names=LAYERS,
        class_count=CLASS_COUNT,
        has_aux_odin=True,
        has_aux_views=True,
        view_count=VIEW_COUNT,
        origin_dataset_id=origin_dataset_id,
        label_restriction=label_restriction,
    )
    return DatasetBundle(
        manifest=manifest,
        logits=logits,
        labels=labels.astype(INT_DTYPE),
        predictions=predictions,
        sample_ids=sample_ids.astype(INT_DTYPE),
        features={
            "block1": block1.astype(FLOAT_DTYPE),
            "penult": penult.astype(FLOAT_DTYPE),
        },
        origin_ids=origin_ids.astype(INT_DTYPE) if origin_ids is not None else None,
        odin_logits=odin_logits,
        view_features=views,
    )


def _id_cloud(rng, penult_means, first_means, labels, noise=1.8):
    n = labels.shape[0]
    penult = penult_means[labels] + rng.normal(scale=noise, size=(n, PENULT_DIM))
    block1 = first_means[labels] + rng.normal(scale=1.5, size=(n, FIRST_DIM))
    return penult, block1


def make_demo_tree(root: str | Path, seed: int = 0) -> Path:
    """Write the full demo tree: head, ID train/val, five OOD datasets."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    head, penult_means, first_means = _head_and_means(rng)
    write_model_head(head, root)

    def round_robin(n):
        return np.arange(n) % CLASS_COUNT

    # ID train / validation
    labels = round_robin(800)
    penult, block1 = _id_cloud(rng, penult_means, first_means, labels)
    write_bundle(
        _assemble("id_train", "in_distribution", penult, block1, labels,
                  np.arange(800), head, rng),
        root,
    )
    val_labels = round_robin(500)
    val_penult, val_block1 = _id_cloud(rng, penult_means, first_means, val_labels)
    val = _assemble("id_val", "in_distribution", val_penult, val_block1, val_labels,
                    10_000 + np.arange(500), head, rng)
    write_bundle(val, root)

    # Novel classes: fresh means, no ground truth
    novel_means = rng.normal(scale=2.0, size=(3, PENULT_DIM))
    novel_first = rng.normal(scale=1.2, size=(3, FIRST_DIM))
    idx = rng.integers(3, size=200)
    write_bundle(
        _assemble(
            "ood_novel", "novel_classes",
            novel_means[idx] + rng.normal(scale=1.8, size=(200, PENULT_DIM)),
            novel_first[idx] + rng.normal(scale=1.5, size=(200, FIRST_DIM)),
            np.full(200, -1), 20_000 + np.arange(200), head, rng,
        ),
        root,
    )

    # Adversarial: perturb validation features toward another class mean
    pick = rng.permutation(500)[:200]
    targets = (val.labels[pick] + 1 + rng.integers(CLASS_COUNT - 1, size=200)) % CLASS_COUNT
    clean_penult = val_penult[pick]
    adv_penult = clean_penult + 0.85 * (penult_means[targets] - clean_penult)
    adv_block1 = val_block1[pick] + rng.normal(scale=0.2, size=(200, FIRST_DIM))
    write_bundle(
        _assemble(
            "ood_adv", "adversarial", adv_penult, adv_block1,
            np.asarray(val.labels[pick]), 30_000 + np.arange(200), head, rng,
            origin_dataset_id="id_val", origin_ids=np.asarray(val.sample_ids[pick]),
        ),
        root,
    )

    # Synthetic: broader clouds around the true means, intended class known
    synth_labels = round_robin(200)
    write_bundle(
        _assemble(
            "ood_synth", "synthetic",
            penult_means[synth_labels] + rng.normal(scale=2.2, size=(200, PENULT_DIM)),
            first_means[synth_labels] + rng.normal(scale=1.8, size=(200, FIRST_DIM)),
            synth_labels, 40_000 + np.arange(200), head, rng,
        ),
        root,
    )

    # Corruption: heavy isotropic noise, labels kept
    corrupt_labels = round_robin(200)
    write_bundle(
        _assemble(
            "ood_corrupt", "corruption",
            penult_means[corrupt_labels] + rng.normal(scale=3.0, size=(200, PENULT_DIM)),
            first_means[corrupt_labels] + rng.normal(scale=2.4, size=(200, FIRST_DIM)),
            corrupt_labels, 50_000 + np.arange(200), head, rng,
        ),
        root,
    )

    # Multi-label: mixtures of two restricted-class means, no ground truth
    restriction = frozenset({0, 1, 2})
    a = rng.integers(3, size=150)
    b = (a + 1 + rng.integers(2, size=150)) % 3
    mixed = 0.5 * (penult_means[a] + penult_means[b])
    mixed_first = 0.5 * (first_means[a] + first_means[b])
    write_bundle(
        _assemble(
            "ood_multi", "multi_label",
            mixed + rng.normal(scale=1.8, size=(150, PENULT_DIM)),
            mixed_first + rng.normal(scale=1.5, size=(150, FIRST_DIM)),
            np.full(150, -1), 60_000 + np.arange(150), head, rng,
            label_restriction=restriction,
        ),
        root,
    )
    return root


DEMO_CONFIG = """\
root = "."
output_dir = "out"
seed = 7

[datasets]
id_train = "id_train"
id_val = "id_val"

[datasets.ood]
ood_novel = "novel_classes"
ood_adv = "adversarial"
ood_synth = "synthetic"
ood_corrupt = "corruption"
ood_multi = "multi_label"

[ensemble]
ids = ["Ens-F", "Ens-R"]
candidates = [1, 2, 5, 10, 20]
validation_fraction = 0.25
corr_threshold = 0.95

[gmm]
tol = 1e-6
reg = 1e-6
restarts = 3
max_iter = 500

[detectors]
temperature = 1.0
dice_keep_fraction = 0.7
react_percentile = 90.0
vim_dim = 0
lambda_scale = 1e-6

[evaluate]
scorers = []
timing_baseline = 0.0
"""


def write_demo_config(root: str | Path) -> Path:
    path = Path(root) / "config.toml"
    path.write_text(DEMO_CONFIG, encoding="utf-8")
    return path


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="generate a synthetic demo dataset tree")
    parser.add_argument("directory", help="target directory for the tree")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    root = make_demo_tree(args.directory, seed=args.seed)
    config = write_demo_config(root)
    print(f"demo tree written to {root} (config: {config})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
