import math

import numpy as np
import pytest

from oodkit.errors import CapabilityError
from oodkit.evaluate import auroc
from oodkit.ingest import ModelHead, SampleRecord
from oodkit.scores import (
    BUILTIN_ENSEMBLES,
    MEMBER_NAMES,
    EnsembleDefinition,
    cadet_intra_similarity,
    dice_energy,
    doctor_alpha,
    energy,
    gradnorm,
    logit_norm,
    max_logit,
    mds_all,
    mds_layer,
    msp,
    odin,
    react_energy,
    score_bundle,
    score_vector,
    vim,
)
from oodkit.stats import DiceMask, FittedStats, LayerGaussianStats, ReactThreshold, VimStats


def longdouble_softmax_max(logits):
    z = np.asarray(logits, dtype=np.longdouble)
    e = np.exp(z - z.max())
    return float((e / e.sum()).max())


def make_record(logits, features=None, odin_logits=None, views=None, sample_id=0):
    return SampleRecord(
        sample_id=sample_id,
        label=0,
        prediction=int(np.argmax(logits)),
        logits=np.asarray(logits, dtype=np.float64),
        features=features or {},
        odin_logits=None if odin_logits is None else np.asarray(odin_logits, np.float64),
        view_features=None if views is None else np.asarray(views, np.float64),
    )


def make_stats(weight, bias, clip=np.inf, mask=None, vim_dim=1, layers=None):
    """Hand-assembled FittedStats for controlled score checks."""
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    c, d = weight.shape
    head = ModelHead(weight=weight, bias=bias, penultimate_layer="penult")
    if mask is None:
        mask = np.ones((c, d), dtype=bool)
    if layers is None:
        layers = {
            "penult": LayerGaussianStats(
                layer_name="penult",
                class_means=np.zeros((c, d)),
                shared_precision=np.eye(d),
                regularization=0.0,
            )
        }
    basis, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(d, vim_dim)))
    return FittedStats(
        layers=layers,
        vim=VimStats(offset=np.zeros(d), principal_basis=basis, alpha=1.0, principal_dim=vim_dim),
        dice=DiceMask(mask=np.asarray(mask, dtype=bool), keep_fraction=1.0),
        react=ReactThreshold(clip_value=float(clip), percentile=100.0),
        head=head,
        meta={},
    )


class TestLogitScores:
    def test_msp_uniform(self):
        assert msp([0.0, 0.0, 0.0, 0.0]) == 0.25

    def test_msp_analytic(self):
        np.testing.assert_allclose(msp([math.log(2.0), 0.0]), 2.0 / 3.0, rtol=1e-14)

    def test_msp_matches_extended_precision(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = rng.normal(scale=5.0, size=10)
            assert abs(msp(logits) - longdouble_softmax_max(logits)) < 1e-12

    def test_max_logit(self):
        assert max_logit([1.0, 2.0, 3.0]) == 3.0
        assert max_logit([5.0, 5.0]) == 5.0
        rng = np.random.default_rng(1)
        logits = rng.normal(size=64)
        assert max_logit(logits) == max(float(v) for v in logits)

    def test_logit_norm(self):
        assert logit_norm([3.0, 4.0]) == 5.0
        assert logit_norm([0.0, 0.0]) == 0.0
        rng = np.random.default_rng(2)
        logits = rng.normal(size=32)
        oracle = float(np.sqrt(np.sum(np.asarray(logits, np.longdouble) ** 2)))
        np.testing.assert_allclose(logit_norm(logits), oracle, rtol=1e-12)

    def test_energy_analytic(self):
        np.testing.assert_allclose(energy([0.0, 0.0]), math.log(2.0), rtol=1e-14)

    def test_energy_no_overflow(self):
        value = energy([1000.0, 0.0])
        assert np.isfinite(value)
        np.testing.assert_allclose(value, 1000.0, atol=1e-12)

    def test_energy_matches_extended_precision(self):
        rng = np.random.default_rng(3)
        for temperature in (1.0, 2.5):
            logits = rng.normal(scale=10.0, size=16)
            z = np.asarray(logits, np.longdouble) / temperature
            oracle = float(temperature * (np.log(np.sum(np.exp(z - z.max()))) + z.max()))
            np.testing.assert_allclose(energy(logits, temperature), oracle, rtol=1e-13)

    def test_doctor_alpha(self):
        assert doctor_alpha([0.0] * 4) == 0.25
        assert doctor_alpha([200.0, 0.0, 0.0]) > 1.0 - 1e-12  # one-hot limit
        rng = np.random.default_rng(4)
        logits = rng.normal(scale=3.0, size=12)
        z = np.asarray(logits, np.longdouble)
        p = np.exp(z - z.max())
        p /= p.sum()
        np.testing.assert_allclose(doctor_alpha(logits), float((p**2).sum()), rtol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=8)
        shift = 13.5
        np.testing.assert_allclose(msp(logits + shift), msp(logits), rtol=1e-12)
        np.testing.assert_allclose(
            doctor_alpha(logits + shift), doctor_alpha(logits), rtol=1e-12
        )
        np.testing.assert_allclose(
            energy(logits + shift), energy(logits) + shift, rtol=1e-12
        )


class TestOdin:
    def test_uniform(self):
        rec = make_record([1.0, 0.0, 0.0, 0.0, 0.0], odin_logits=[7.0] * 5)
        assert odin(rec) == 0.2

    def test_analytic_temperature(self):
        rec = make_record([1.0, 0.0], odin_logits=[1000.0 * math.log(2.0), 0.0])
        np.testing.assert_allclose(odin(rec), 2.0 / 3.0, rtol=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(6)
        perturbed = rng.normal(scale=4.0, size=10)
        rec = make_record(rng.normal(size=10), odin_logits=perturbed)
        np.testing.assert_allclose(
            odin(rec), longdouble_softmax_max(perturbed / 1000.0), rtol=1e-12
        )

    def test_missing_channel(self):
        with pytest.raises(CapabilityError, match="odin"):
            odin(make_record([1.0, 0.0]))


class TestMahalanobisScores:
    def test_at_mean(self):
        layer = LayerGaussianStats("penult", np.zeros((2, 3)), np.eye(3), 0.0)
        rec = make_record([1.0, 0.0], features={"penult": np.zeros(3)})
        assert mds_layer(rec, layer) == 0.0

    def test_analytic_distance(self):
        layer = LayerGaussianStats("penult", np.zeros((1, 2)), np.eye(2), 0.0)
        rec = make_record([1.0, 0.0], features={"penult": np.array([3.0, 4.0])})
        assert mds_layer(rec, layer) == -25.0

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 5))
        precision = a @ a.T + 5 * np.eye(5)
        means = rng.normal(size=(3, 5))
        layer = LayerGaussianStats("penult", means, precision, 0.0)
        for _ in range(100):
            f = rng.normal(size=5)
            rec = make_record([1.0, 0.0], features={"penult": f})
            oracle = max(
                -float((f - mu) @ precision @ (f - mu)) for mu in means
            )
            np.testing.assert_allclose(mds_layer(rec, layer), oracle, atol=1e-8)

    def test_mds_all_single_layer_identity(self):
        layer = LayerGaussianStats("penult", np.zeros((2, 3)), np.eye(3), 0.0)
        stats = make_stats(np.ones((2, 3)), np.zeros(2), layers={"penult": layer})
        rec = make_record([1.0, 0.0], features={"penult": np.array([1.0, 2.0, 0.0])})
        assert mds_all(rec, stats) == mds_layer(rec, layer)

    def test_mds_all_mean_of_two_layers(self):
        layer_a = LayerGaussianStats("a", np.zeros((1, 2)), np.eye(2), 0.0)
        layer_b = LayerGaussianStats("b", np.zeros((1, 2)), np.eye(2), 0.0)
        stats = make_stats(
            np.ones((1, 2)), np.zeros(1), layers={"a": layer_a, "b": layer_b}
        )
        rec = make_record(
            [1.0],
            features={"a": np.array([math.sqrt(2.0), 0.0]), "b": np.array([2.0, 0.0])},
        )
        np.testing.assert_allclose(mds_all(rec, stats), -3.0, rtol=1e-14)


class TestHeadScores:
    def test_react_identity_without_clipping(self):
        rng = np.random.default_rng(8)
        weight = rng.normal(size=(4, 6))
        bias = rng.normal(size=4)
        f = rng.normal(size=6)
        stats = make_stats(weight, bias, clip=np.inf)
        rec = make_record(weight @ f + bias, features={"penult": f})
        assert react_energy(rec, stats) == energy(rec.logits)

    def test_react_full_clip_analytic(self):
        weight = np.array([[1.0, 2.0], [3.0, -1.0]])
        bias = np.array([0.5, -0.5])
        f = np.array([4.0, 7.0])
        clip = 2.0  # below min(f): every activation clips to c
        stats = make_stats(weight, bias, clip=clip)
        rec = make_record(weight @ f + bias, features={"penult": f})
        expected = energy(clip * weight.sum(axis=1) + bias)
        np.testing.assert_allclose(react_energy(rec, stats), expected, rtol=1e-14)

    def test_react_matches_recompute_oracle(self):
        rng = np.random.default_rng(9)
        weight = rng.normal(size=(5, 8))
        bias = rng.normal(size=5)
        stats = make_stats(weight, bias, clip=0.3)
        for _ in range(50):
            f = rng.normal(size=8)
            rec = make_record(weight @ f + bias, features={"penult": f})
            oracle = energy(weight @ np.minimum(f, 0.3) + bias)
            np.testing.assert_allclose(react_energy(rec, stats), oracle, rtol=1e-12)

    def test_gradnorm_uniform_probs(self):
        stats = make_stats(np.ones((3, 2)), np.zeros(3))
        rec = make_record([2.0, 2.0, 2.0], features={"penult": np.array([1.0, -4.0])})
        assert gradnorm(rec, stats) == 0.0

    def test_gradnorm_analytic(self):
        stats = make_stats(np.ones((2, 2)), np.zeros(2))
        rec = make_record(
            [math.log(3.0), 0.0], features={"penult": np.array([1.0, 2.0])}
        )
        np.testing.assert_allclose(gradnorm(rec, stats), 1.5, rtol=1e-12)

    def test_gradnorm_factorization_matches_outer_product(self):
        rng = np.random.default_rng(10)
        stats = make_stats(np.ones((6, 9)), np.zeros(6))
        for _ in range(200):
            logits = rng.normal(scale=3.0, size=6)
            f = rng.normal(size=9)
            rec = make_record(logits, features={"penult": f})
            p = np.exp(logits - logits.max())
            p /= p.sum()
            grad = np.outer(p - 1.0 / 6.0, f)
            np.testing.assert_allclose(
                gradnorm(rec, stats), np.abs(grad).sum(), rtol=1e-10
            )

    def test_dice_full_mask_identity(self):
        rng = np.random.default_rng(11)
        weight = rng.normal(size=(4, 5))
        bias = rng.normal(size=4)
        f = rng.normal(size=5)
        stats = make_stats(weight, bias, mask=np.ones((4, 5), dtype=bool))
        rec = make_record(weight @ f + bias, features={"penult": f})
        assert dice_energy(rec, stats) == energy(rec.logits)

    def test_dice_empty_mask_gives_bias_energy(self):
        rng = np.random.default_rng(12)
        weight = rng.normal(size=(4, 5))
        bias = rng.normal(size=4)
        f = rng.normal(size=5)
        stats = make_stats(weight, bias, mask=np.zeros((4, 5), dtype=bool))
        rec = make_record(weight @ f + bias, features={"penult": f})
        assert dice_energy(rec, stats) == energy(bias)

    def test_dice_matches_masked_matmul_oracle(self):
        rng = np.random.default_rng(13)
        weight = rng.normal(size=(4, 10))
        bias = rng.normal(size=4)
        mask = rng.random((4, 10)) < 0.6
        stats = make_stats(weight, bias, mask=mask)
        for _ in range(50):
            f = rng.normal(size=10)
            rec = make_record(weight @ f + bias, features={"penult": f})
            oracle = energy((weight * mask) @ f + bias)
            np.testing.assert_allclose(dice_energy(rec, stats), oracle, rtol=1e-12)


class TestVim:
    def _stats(self, rng, d=6, dprime=2, alpha=1.7):
        basis, _ = np.linalg.qr(rng.normal(size=(d, dprime)))
        stats = make_stats(rng.normal(size=(4, d)), rng.normal(size=4))
        vim_stats = VimStats(
            offset=rng.normal(size=d),
            principal_basis=basis,
            alpha=alpha,
            principal_dim=dprime,
        )
        return FittedStats(
            layers=stats.layers,
            vim=vim_stats,
            dice=stats.dice,
            react=stats.react,
            head=stats.head,
            meta={},
        )

    def test_zero_residual_inside_subspace(self):
        rng = np.random.default_rng(14)
        stats = self._stats(rng)
        coeff = rng.normal(size=2)
        f = stats.vim.offset + stats.vim.principal_basis @ coeff
        logits = rng.normal(size=4)
        rec = make_record(logits, features={"penult": f})
        from scipy.special import logsumexp

        np.testing.assert_allclose(vim(rec, stats), logsumexp(logits), atol=1e-10)

    def test_alpha_zero_degenerates_to_energy(self):
        rng = np.random.default_rng(15)
        stats = self._stats(rng, alpha=0.0)
        logits = rng.normal(size=4)
        rec = make_record(logits, features={"penult": rng.normal(size=6)})
        np.testing.assert_allclose(vim(rec, stats), energy(logits), rtol=1e-14)

    def test_rank_order_matches_virtual_logit_softmax(self):
        rng = np.random.default_rng(16)
        stats = self._stats(rng, alpha=2.3)
        ours = np.empty(100)
        oracle = np.empty(100)
        for i in range(100):
            logits = rng.normal(scale=2.0, size=4)
            f = rng.normal(size=6)
            rec = make_record(logits, features={"penult": f})
            ours[i] = vim(rec, stats)
            centered = f - stats.vim.offset
            resid = centered - stats.vim.principal_basis @ (
                stats.vim.principal_basis.T @ centered
            )
            virtual = stats.vim.alpha * np.linalg.norm(resid)
            full = np.concatenate([logits, [virtual]])
            p0 = np.exp(virtual - full.max()) / np.exp(full - full.max()).sum()
            oracle[i] = p0  # probability of the virtual class; higher = OOD
        assert np.array_equal(np.argsort(ours), np.argsort(-oracle))


class TestCadet:
    def test_identical_views(self):
        views = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
        rec = make_record([1.0, 0.0], views=views)
        np.testing.assert_allclose(cadet_intra_similarity(rec), 1.0, rtol=1e-12)

    def test_orthogonal_views(self):
        rec = make_record([1.0, 0.0], views=np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert cadet_intra_similarity(rec) == 0.0

    def test_zero_norm_view_contributes_zero(self):
        rec = make_record([1.0, 0.0], views=np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert cadet_intra_similarity(rec) == 0.0

    def test_matches_pairwise_loop(self):
        rng = np.random.default_rng(17)
        views = rng.normal(size=(5, 7))
        rec = make_record([1.0, 0.0], views=views)
        total = 0.0
        for i in range(5):
            for j in range(i + 1, 5):
                total += views[i] @ views[j] / (
                    np.linalg.norm(views[i]) * np.linalg.norm(views[j])
                )
        np.testing.assert_allclose(
            cadet_intra_similarity(rec), total * 2.0 / 20.0, rtol=1e-12
        )

    def test_missing_channel(self):
        with pytest.raises(CapabilityError, match="cadet"):
            cadet_intra_similarity(make_record([1.0, 0.0]))


class TestScoreVector:
    def test_builtin_member_lists(self):
        assert BUILTIN_ENSEMBLES["Ens-V"].members == (
            "gradnorm", "odin", "mds_all", "mds_l", "cadet", "dice", "msp", "max_logit",
        )
        assert BUILTIN_ENSEMBLES["Ens-R"].members == (
            "gradnorm", "odin", "mds_all", "mds_l", "cadet", "react", "vim", "doctor_alpha",
        )
        assert BUILTIN_ENSEMBLES["Ens-F"].members == (
            "msp", "max_logit", "mds_all", "mds_l", "ebo",
        )

    def test_ens_f_ordering(self, demo_bundles, demo_stats):
        rec = demo_bundles["id_val"].record(3)
        out = score_vector(rec, demo_stats, BUILTIN_ENSEMBLES["Ens-F"])
        expected = [
            msp(rec.logits),
            max_logit(rec.logits),
            mds_all(rec, demo_stats),
            mds_layer(rec, demo_stats.layers[demo_stats.layer_names[-1]]),
            energy(rec.logits),
        ]
        np.testing.assert_allclose(out.values, expected, rtol=1e-12)
        assert out.ensemble_id == "Ens-F"

    def test_capability_error_names_member(self, demo_bundles, demo_stats):
        rec = demo_bundles["id_val"].record(0)
        stripped = SampleRecord(
            sample_id=rec.sample_id,
            label=rec.label,
            prediction=rec.prediction,
            logits=rec.logits,
            features=rec.features,
            odin_logits=None,
            view_features=rec.view_features,
        )
        with pytest.raises(CapabilityError, match="odin"):
            score_vector(stripped, demo_stats, BUILTIN_ENSEMBLES["Ens-R"])

    def test_all_members_finite_on_demo_records(self, demo_bundles, demo_stats):
        ens = EnsembleDefinition("all", MEMBER_NAMES)
        for dataset in ("id_val", "ood_corrupt"):
            rec = demo_bundles[dataset].record(5)
            out = score_vector(rec, demo_stats, ens)
            assert np.isfinite(out.values).all()

    def test_duplicate_members_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            EnsembleDefinition("bad", ("msp", "msp"))

    def test_unknown_member_rejected(self):
        with pytest.raises(ValueError, match="unresolvable"):
            EnsembleDefinition("bad", ("msp", "renyi"))


class TestBatchAgainstRecords:
    def test_score_bundle_matches_per_record(self, demo_bundles, demo_stats):
        ens = EnsembleDefinition("all", MEMBER_NAMES)
        bundle = demo_bundles["id_val"]
        matrix = score_bundle(bundle, demo_stats, ens)
        assert matrix.shape == (len(bundle), len(MEMBER_NAMES))
        idx = np.linspace(0, len(bundle) - 1, 25).astype(int)
        for i in idx:
            expected = score_vector(bundle.record(int(i)), demo_stats, ens).values
            np.testing.assert_allclose(matrix[i], expected, rtol=1e-10, atol=1e-12)

    def test_capability_error_in_batch(self, demo_bundles, demo_stats):
        bundle = demo_bundles["id_val"]
        from dataclasses import replace

        stripped = replace(bundle, view_features=None)
        with pytest.raises(CapabilityError, match="cadet"):
            score_bundle(stripped, demo_stats, ["cadet"])


class TestNumericalStability:
    def test_no_nan_inf_for_bounded_logits(self, demo_stats):
        rng = np.random.default_rng(18)
        ens = EnsembleDefinition("all", MEMBER_NAMES)
        d = demo_stats.head.weight.shape[1]
        extremes = [
            np.full(5, 1e4),
            np.full(5, -1e4),
            np.array([1e4, -1e4, 0.0, 5.0, -5.0]),
            rng.uniform(-1e4, 1e4, size=5),
        ]
        for logits in extremes:
            rec = SampleRecord(
                sample_id=0,
                label=0,
                prediction=int(np.argmax(logits)),
                logits=logits,
                features={
                    "block1": rng.normal(size=8),
                    "penult": rng.normal(size=d),
                },
                odin_logits=logits.copy(),
                view_features=rng.normal(size=(5, d)),
            )
            out = score_vector(rec, demo_stats, ens)
            assert np.isfinite(out.values).all(), logits


class TestAucInvariance:
    def test_monotone_transform_preserves_auc(self):
        rng = np.random.default_rng(19)
        id_scores = rng.normal(size=300)
        ood_scores = rng.normal(loc=-0.5, size=200)
        base = auroc(id_scores, ood_scores)
        transformed = auroc(2.0 * id_scores + 1.0, 2.0 * ood_scores + 1.0)
        assert base == transformed
