import numpy as np
import pytest

import poselift.autodiff as ad
from poselift.errors import (
    DegenerateReprojection,
    InsufficientViews,
    RigGroupTooSmall,
    ShapeMismatch,
)
from poselift.geometry import rodrigues
from poselift.losses import (
    EQUALITY_WEIGHT,
    ViewPrediction,
    camera_consistency_loss,
    diagonal_reprojection_loss,
    direct_camera_equality_loss,
    direct_pose_equality_loss,
    project_xy,
    reprojection_loss,
    rig_permutation,
    total_loss,
    view_mixing_loss,
)


def random_views(rng, m=3, b=4, j=5):
    """m views whose canonical poses/rotations are independent random nodes."""
    views = []
    for _ in range(m):
        canonical = ad.constant(rng.normal(size=(b, j, 3)))
        rot = np.stack([rodrigues(rng.normal(size=3)) for _ in range(b)])
        views.append(
            ViewPrediction(
                canonical=canonical,
                rotation=ad.constant(rot),
                observation=rng.normal(size=(b, j, 2)),
                confidences=rng.random((b, j)),
            )
        )
    return views


def consistent_views(rng, m=3, b=2, j=6):
    """Views generated from one shared pose per sample; mixing loss is zero."""
    x = rng.normal(size=(b, j, 3))
    x -= x[:, :1]
    x /= np.linalg.norm(x, axis=(1, 2), keepdims=True)
    views = []
    for _ in range(m):
        rot = np.stack([rodrigues(rng.normal(size=3)) for _ in range(b)])
        cam = np.einsum("bij,bkj->bki", rot, x)
        obs = cam[:, :, :2]
        obs = obs - obs[:, :1]
        obs = obs / np.linalg.norm(obs, axis=(1, 2), keepdims=True)
        # the canonical pose is root-centered, so re-center x per view to the
        # same convention the observation uses
        xc = x - x[:, :1]
        views.append(
            ViewPrediction(
                canonical=ad.constant(xc),
                rotation=ad.constant(rot),
                observation=obs,
                confidences=np.ones((b, j)),
            )
        )
    return views


class TestReprojectionLoss:
    def test_hand_example(self):
        # ||w_rep||_F = 5, normalized rows (0.6, 0) and (0, 0.8);
        # residuals 0.4 and 0.2, confidence-weighted sum 0.5*0.4 + 1.0*0.2
        obs = np.array([[1.0, 0.0], [0.0, 1.0]])
        w_rep = np.array([[3.0, 0.0], [0.0, 4.0]])
        conf = np.array([0.5, 1.0])
        loss = reprojection_loss(obs, conf, w_rep)
        assert abs(loss.value - 0.4) < 1e-12

    def test_scale_independence(self):
        rng = np.random.default_rng(0)
        obs = rng.normal(size=(3, 7, 2))
        conf = rng.random((3, 7))
        w_rep = rng.normal(size=(3, 7, 2))
        base = reprojection_loss(obs, conf, w_rep).value
        for alpha in (1e-3, 0.1, 4.0, 1e5):
            scaled = reprojection_loss(obs, conf, alpha * w_rep).value
            assert abs(scaled - base) < 1e-9 * max(1.0, base)

    def test_zero_at_perfect_reprojection(self):
        rng = np.random.default_rng(1)
        w_rep = rng.normal(size=(2, 5, 2))
        obs = w_rep / np.linalg.norm(w_rep, axis=(1, 2), keepdims=True)
        loss = reprojection_loss(obs, np.ones((2, 5)), w_rep)
        assert loss.value < 1e-12

    def test_linear_in_confidence(self):
        rng = np.random.default_rng(2)
        obs = rng.normal(size=(4, 6, 2))
        conf = rng.random((4, 6))
        w_rep = rng.normal(size=(4, 6, 2))
        one = reprojection_loss(obs, conf, w_rep).value
        three = reprojection_loss(obs, 3.0 * conf, w_rep).value
        assert abs(three - 3.0 * one) < 1e-9

    def test_zero_confidence_ignores_joint(self):
        rng = np.random.default_rng(3)
        obs = rng.normal(size=(5, 2))
        conf = np.array([1.0, 1.0, 0.0, 1.0, 1.0])
        w_rep = rng.normal(size=(5, 2))
        base = reprojection_loss(obs, conf, w_rep).value
        obs2 = obs.copy()
        obs2[2] += 100.0  # arbitrarily wrong but masked out
        assert abs(reprojection_loss(obs2, conf, w_rep).value - base) < 1e-12

    def test_batch_mean_reduction(self):
        rng = np.random.default_rng(4)
        obs = rng.normal(size=(6, 4, 2))
        conf = rng.random((6, 4))
        w_rep = rng.normal(size=(6, 4, 2))
        whole = reprojection_loss(obs, conf, w_rep).value
        singles = [
            reprojection_loss(obs[i], conf[i], w_rep[i]).value for i in range(6)
        ]
        assert abs(whole - np.mean(singles)) < 1e-12

    def test_degenerate_norm(self):
        with pytest.raises(DegenerateReprojection):
            reprojection_loss(np.ones((3, 2)), np.ones(3), np.zeros((3, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            reprojection_loss(np.ones((3, 2)), np.ones(3), np.ones((4, 2)))

    def test_gradient_flows_through_norm(self):
        # the normalization is part of the graph: gradient differs from the
        # frozen-norm one, and matches finite differences
        rng = np.random.default_rng(5)
        arrays = {"w": rng.normal(size=(2, 5, 2)) + 1.0}
        obs = rng.normal(size=(2, 5, 2))
        conf = rng.random((2, 5))
        err = ad.check_gradients(
            lambda n: reprojection_loss(obs, conf, n["w"]), arrays, eps=1e-6
        )
        assert err < 1e-4


class TestProjectXy:
    def test_matches_rotation_then_drop(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(3, 5, 3))
        rot = np.stack([rodrigues(rng.normal(size=3)) for _ in range(3)])
        out = project_xy(ad.constant(rot), ad.constant(x)).value
        expected = np.einsum("bij,bkj->bki", rot, x)[:, :, :2]
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestViewMixing:
    def test_matches_explicit_double_sum(self):
        rng = np.random.default_rng(7)
        views = random_views(rng, m=3)
        expected = 0.0
        for a in range(3):
            for b in range(3):
                w_rep = project_xy(views[b].rotation, views[a].canonical)
                expected += reprojection_loss(
                    views[b].observation, views[b].confidences, w_rep
                ).value
        assert abs(view_mixing_loss(views).value - expected) < 1e-9

    def test_includes_diagonal(self):
        rng = np.random.default_rng(8)
        views = random_views(rng, m=2)
        mixing = view_mixing_loss(views).value
        diag = diagonal_reprojection_loss(views).value
        assert mixing > diag  # off-diagonal terms add on top

    def test_zero_for_consistent_views(self):
        views = consistent_views(np.random.default_rng(9))
        assert view_mixing_loss(views).value < 1e-10

    def test_single_view_rejected(self):
        rng = np.random.default_rng(10)
        with pytest.raises(InsufficientViews):
            view_mixing_loss(random_views(rng, m=1))

    def test_term_count_scaling(self):
        # with identical views every term is equal, so the total is m^2 times
        # one self-reprojection term
        rng = np.random.default_rng(11)
        (v,) = random_views(rng, m=1)
        for m in (2, 3, 4):
            views = [v] * m
            single = reprojection_loss(
                v.observation, v.confidences, project_xy(v.rotation, v.canonical)
            ).value
            assert abs(view_mixing_loss(views).value - m * m * single) < 1e-9


class TestRigPermutation:
    def test_stays_within_rigs(self):
        rng = np.random.default_rng(12)
        rig_ids = ["a", "b", "a", "a", "b", "c", "c"]
        for _ in range(20):
            perm, include = rig_permutation(rig_ids, rng)
            for i, donor in enumerate(perm):
                assert rig_ids[i] == rig_ids[donor]
            # per-rig restriction is a permutation of the rig's indices
            for rid in set(rig_ids):
                idx = [i for i, r in enumerate(rig_ids) if r == rid]
                assert sorted(perm[idx]) == idx

    def test_singletons_excluded(self):
        rng = np.random.default_rng(13)
        perm, include = rig_permutation(["a", "b", "a"], rng)
        assert perm[1] == 1 and not include[1]
        assert include[0] and include[2]

    def test_singletons_raise_when_required(self):
        rng = np.random.default_rng(14)
        with pytest.raises(RigGroupTooSmall):
            rig_permutation(["a", "b", "a"], rng, allow_skip_singletons=False)

    def test_deterministic_under_seed(self):
        rig_ids = ["a"] * 10
        one, _ = rig_permutation(rig_ids, np.random.default_rng(5))
        two, _ = rig_permutation(rig_ids, np.random.default_rng(5))
        np.testing.assert_array_equal(one, two)


class TestCameraConsistency:
    def test_identity_permutation_matches_off_diagonal_mixing(self):
        # with the identity donor map the composed rotation collapses to the
        # donor view's own rotation, reproducing the off-diagonal mixing terms
        rng = np.random.default_rng(15)
        views = random_views(rng, m=3, b=4)
        rig_ids = ["r"] * 4
        perm = np.arange(4)
        cam = camera_consistency_loss(views, rig_ids, perm).value
        off_diag = (
            view_mixing_loss(views).value - diagonal_reprojection_loss(views).value
        )
        assert abs(cam - off_diag) < 1e-9

    def test_zero_for_shared_static_rig(self):
        # same rotations for every sample in the rig: swapping donors changes
        # nothing, so consistent views stay at zero loss
        rng = np.random.default_rng(16)
        b, j, m = 4, 6, 3
        x = rng.normal(size=(b, j, 3))
        x -= x[:, :1]
        rots = [rodrigues(rng.normal(size=3)) for _ in range(m)]
        views = []
        for r in rots:
            cam = x @ r.T
            obs = cam[:, :, :2] - cam[:, :1, :2]
            obs /= np.linalg.norm(obs, axis=(1, 2), keepdims=True)
            views.append(
                ViewPrediction(
                    canonical=ad.constant(x),
                    rotation=ad.constant(np.broadcast_to(r, (b, 3, 3)).copy()),
                    observation=obs,
                    confidences=np.ones((b, j)),
                )
            )
        perm, include = rig_permutation(["r"] * b, rng)
        loss = camera_consistency_loss(views, ["r"] * b, perm, include)
        assert loss.value < 1e-10

    def test_rejects_cross_rig_permutation(self):
        rng = np.random.default_rng(17)
        views = random_views(rng, m=2, b=4)
        with pytest.raises(RigGroupTooSmall):
            camera_consistency_loss(
                views, ["a", "a", "b", "b"], np.array([2, 3, 0, 1])
            )

    def test_all_excluded_gives_zero(self):
        rng = np.random.default_rng(18)
        views = random_views(rng, m=2, b=2)
        loss = camera_consistency_loss(
            views, ["a", "b"], np.arange(2), include=np.zeros(2, dtype=bool)
        )
        assert loss.value == 0.0

    def test_exclusion_renormalizes_batch_mean(self):
        # excluding one sample equals evaluating the loss on the others alone
        rng = np.random.default_rng(19)
        views = random_views(rng, m=2, b=3)
        rig_ids = ["r", "r", "s"]
        perm = np.array([1, 0, 2])
        include = np.array([True, True, False])
        full = camera_consistency_loss(views, rig_ids, perm, include).value
        sub = [
            ViewPrediction(
                canonical=ad.constant(v.canonical.value[:2]),
                rotation=ad.constant(v.rotation.value[:2]),
                observation=v.observation[:2],
                confidences=v.confidences[:2],
            )
            for v in views
        ]
        expected = camera_consistency_loss(
            sub, ["r", "r"], np.array([1, 0])
        ).value
        assert abs(full - expected) < 1e-9


class TestEqualityLosses:
    def test_pose_equality_hand_example(self):
        obs = np.zeros((1, 2, 2))
        conf = np.ones((1, 2))
        rot = ad.constant(np.eye(3)[None])
        a = ViewPrediction(ad.constant(np.zeros((1, 2, 3))), rot, obs, conf)
        shifted = np.zeros((1, 2, 3))
        shifted[0, 1, 0] = 2.0  # one joint offset d=2 in one coordinate
        b = ViewPrediction(ad.constant(shifted), rot, obs, conf)
        # mean over the 3j=6 coordinates: d^2 / (3j) = 4/6
        assert abs(direct_pose_equality_loss([a, b]).value - 4.0 / 6.0) < 1e-15

    def test_pose_equality_zero_for_identical(self):
        rng = np.random.default_rng(20)
        views = random_views(rng, m=1)
        v = views[0]
        same = ViewPrediction(
            v.canonical, v.rotation, v.observation, v.confidences
        )
        assert direct_pose_equality_loss([v, same]).value == 0.0

    def test_camera_equality_zero_for_constant_relative_rotation(self):
        rng = np.random.default_rng(21)
        b = 5
        r1, r2 = rodrigues(rng.normal(size=3)), rodrigues(rng.normal(size=3))
        obs = rng.normal(size=(b, 4, 2))
        conf = np.ones((b, 4))
        views = [
            ViewPrediction(
                ad.constant(rng.normal(size=(b, 4, 3))),
                ad.constant(np.broadcast_to(r, (b, 3, 3)).copy()),
                obs,
                conf,
            )
            for r in (r1, r2)
        ]
        assert direct_camera_equality_loss(views).value < 1e-28

    def test_camera_equality_positive_when_rotations_vary(self):
        rng = np.random.default_rng(22)
        views = random_views(rng, m=2, b=4)
        assert direct_camera_equality_loss(views).value > 1e-4


class TestTotalLoss:
    def test_plain_mode_equals_view_mixing(self):
        rng = np.random.default_rng(23)
        views = random_views(rng, m=2)
        loss, parts = total_loss(views, static_cameras=False)
        assert abs(loss.value - view_mixing_loss(views).value) < 1e-12
        assert parts["total"] == pytest.approx(parts["view_mixing"])

    def test_static_mode_adds_weighted_camera_term(self):
        rng = np.random.default_rng(24)
        views = random_views(rng, m=2, b=4)
        rig_ids = ["r"] * 4
        perm = np.array([1, 0, 3, 2])
        for lam in (0.5, 2.0):
            loss, parts = total_loss(
                views,
                rig_ids,
                lambda_cam=lam,
                static_cameras=True,
                permutation=perm,
            )
            expected = parts["view_mixing"] + lam * parts["camera_consistency"]
            assert abs(loss.value - expected) < 1e-9

    def test_static_mode_requires_rig_ids(self):
        rng = np.random.default_rng(25)
        with pytest.raises(ValueError):
            total_loss(random_views(rng, m=2), static_cameras=True)

    def test_unknown_ablation(self):
        rng = np.random.default_rng(26)
        with pytest.raises(ValueError):
            total_loss(random_views(rng, m=2), ablation="bogus")

    def test_ablation_modes_compose_diagonal_term(self):
        rng = np.random.default_rng(27)
        views = random_views(rng, m=2)
        diag = diagonal_reprojection_loss(views).value
        pose_loss, _ = total_loss(views, ablation="pose_equality")
        cam_loss, _ = total_loss(views, ablation="camera_equality")
        # composition rescales the per-coordinate means back to per-sample sums
        j = views[0].canonical.shape[1]
        w_pose = EQUALITY_WEIGHT * 3 * j  # one view pair for m=2
        w_cam = EQUALITY_WEIGHT * 2 * 9  # m(m-1)=2 ordered pairs
        assert abs(
            pose_loss.value
            - diag
            - w_pose * direct_pose_equality_loss(views).value
        ) < 1e-9
        assert abs(
            cam_loss.value
            - view_mixing_loss(views).value
            - w_cam * direct_camera_equality_loss(views).value
        ) < 1e-9
