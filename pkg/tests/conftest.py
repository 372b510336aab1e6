import numpy as np
import pytest

from oodkit.ingest import load_dataset, load_model_head
from oodkit.stats import fit_stats
from oodkit.synthetic import make_demo_tree

DATASET_IDS = (
    "id_train",
    "id_val",
    "ood_novel",
    "ood_adv",
    "ood_synth",
    "ood_corrupt",
    "ood_multi",
)


@pytest.fixture(scope="session")
def demo_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("demo_tree")
    make_demo_tree(root, seed=0)
    return root


@pytest.fixture(scope="session")
def demo_bundles(demo_tree):
    return {d: load_dataset(demo_tree, d) for d in DATASET_IDS}


@pytest.fixture(scope="session")
def demo_head(demo_tree):
    return load_model_head(demo_tree)


@pytest.fixture(scope="session")
def demo_stats(demo_bundles, demo_head):
    return fit_stats(demo_bundles["id_train"], demo_head, seed=0)


def brute_force_auc(id_scores, ood_scores) -> float:
    """Pairwise win/tie count oracle; scores oriented higher = ID."""
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood_scores = np.asarray(ood_scores, dtype=np.float64)
    wins = (ood_scores[:, None] < id_scores[None, :]).sum()
    ties = (ood_scores[:, None] == id_scores[None, :]).sum()
    return (wins + 0.5 * ties) / (id_scores.size * ood_scores.size)


def tiny_bundle(dataset_id, labels, predictions, sample_ids, shift_type="in_distribution",
                origin_dataset_id=None, origin_ids=None, class_count=2):
    """In-memory bundle with argmax-consistent logits, for hand-built fixtures."""
    from oodkit.ingest import DatasetBundle, DatasetManifest

    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    n = labels.size
    logits = np.zeros((n, class_count), dtype=np.float32)
    logits[np.arange(n), predictions] = 1.0
    manifest = DatasetManifest(
        dataset_id=dataset_id,
        shift_type=shift_type,
        record_count=n,
        layer_names=("penult",),
        class_count=class_count,
        origin_dataset_id=origin_dataset_id,
    )
    return DatasetBundle(
        manifest=manifest,
        logits=logits,
        labels=labels,
        predictions=predictions,
        sample_ids=np.asarray(sample_ids, dtype=np.int64),
        features={"penult": np.zeros((n, 2), dtype=np.float32)},
        origin_ids=None if origin_ids is None else np.asarray(origin_ids, dtype=np.int64),
    )


def id_score_fn(score_map):
    """Scorer callable mapping sample ids through a fixed table."""

    def fn(bundle):
        return np.array([score_map[int(s)] for s in bundle.sample_ids], dtype=np.float64)

    return fn


def ed_hand_fixtures():
    """8-sample fixtures with hand-checkable ED filtering semantics.

    Returns (bundles, score_map, expected) where expected holds, per ED
    setting, the manually filtered id/ood sample-id lists.
    """
    clean = tiny_bundle(
        "clean",
        labels=[0, 1, 0, 1, 0, 1, 0, 1],
        predictions=[0, 1, 0, 1, 0, 1, 1, 0],  # correct on 0..5
        sample_ids=range(8),
    )
    attacked = tiny_bundle(
        "attacked",
        labels=[0, 1, 0, 1, 0, 1, 0, 1],
        predictions=[1, 0, 1, 1, 0, 1, 0, 1],  # flips on 0,1,2; fails on 3,4,5
        sample_ids=range(100, 108),
        shift_type="adversarial",
        origin_dataset_id="clean",
        origin_ids=range(8),
    )
    corrupted = tiny_bundle(
        "corrupted",
        labels=[0, 1, 0, 1, 0, 1, 0, 1],
        predictions=[1, 1, 1, 0, 0, 1, 0, 1],  # misclassified on 0, 2, 3
        sample_ids=range(200, 208),
        shift_type="corruption",
    )
    score_map = {
        0: 5.0, 1: 3.0, 2: 4.0, 3: 6.0, 4: 5.5, 5: 2.0, 6: 1.0, 7: 8.0,
        100: 3.5, 101: 1.0, 102: 4.5, 103: 0.0, 104: 9.0, 105: 2.5, 106: 7.0, 107: 6.0,
        200: 4.9, 201: 6.1, 202: 3.0, 203: 5.0, 204: 7.0, 205: 2.2, 206: 0.5, 207: 9.9,
    }
    expected = {
        # successful attacks: clean correct (0..5) AND attacked flips (0,1,2)
        "ed_adversarial": {"id": [0, 1, 2], "ood": [100, 101, 102]},
        # clean bundle: correct 0..5, wrong 6,7
        "ed_indist": {"id": [0, 1, 2, 3, 4, 5], "ood": [6, 7]},
        # id side: correctly classified clean; ood side: misclassified corrupted
        "ed_corruption": {"id": [0, 1, 2, 3, 4, 5], "ood": [200, 202, 203]},
    }
    bundles = {"clean": clean, "attacked": attacked, "corrupted": corrupted}
    return bundles, score_map, expected
