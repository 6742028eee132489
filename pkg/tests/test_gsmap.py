"""Gaussian map: projection, compositing, gradients, insertion, optimization."""

import numpy as np
import pytest

from dynsplat.geometry import Intrinsics, Pose, so3_exp
from dynsplat.gsmap import (
    GaussianMap,
    Keyframe,
    MapConfig,
    MapFormatError,
    NoStaticPixels,
    OptimizeConfig,
    RenderConfig,
    insert_from_features,
    load_map,
    load_map_text,
    loss_and_gradients,
    masked_l1_loss,
    optimize_map,
    project_gaussians,
    prune,
    render_brute_force,
    render_depth_for_background,
    render_map,
    render_tiled,
    rotation_matrices,
    save_map,
    save_map_text,
    select_window,
)

INTR = Intrinsics(60.0, 60.0, 32.0, 32.0, 64, 64)
SMALL = Intrinsics(40.0, 40.0, 16.0, 16.0, 32, 32)
CFG = RenderConfig()


def logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def add_gaussian(gmap, position, opacity=0.8, scale=0.1, quat=(1, 0, 0, 0), color=(1, 0, 0)):
    gmap.append(
        np.array([position], dtype=float),
        np.array([logit(opacity)]),
        np.full((1, 3), np.log(scale)),
        np.array([quat], dtype=float),
        np.array([color], dtype=float),
    )


def random_map(rng, n, intr=INTR, z_range=(1.0, 5.0), unit_quats=False):
    gmap = GaussianMap()
    z = rng.uniform(*z_range, size=n)
    half_w = 0.5 * intr.width / intr.fx
    half_h = 0.5 * intr.height / intr.fy
    x = rng.uniform(-half_w, half_w, size=n) * z
    y = rng.uniform(-half_h, half_h, size=n) * z
    quats = rng.normal(size=(n, 4))
    if unit_quats:
        quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    gmap.append(
        np.stack([x, y, z], axis=1),
        rng.uniform(logit(0.05), logit(0.95), size=n),
        np.log(rng.uniform(0.03, 0.25, size=(n, 3))),
        quats,
        rng.uniform(0.0, 1.0, size=(n, 3)),
    )
    return gmap


class TestProjection:
    def test_on_axis_covariance(self):
        # isotropic Gaussian on the optical axis: pixel covariance is
        # (f s / z)^2 on both diagonals plus the dilation floor
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0), scale=0.1)
        proj = project_gaussians(gmap, Pose.identity(), INTR, CFG)
        expected = (60.0 * 0.1 / 2.0) ** 2 + CFG.dilation
        assert proj.cov2d[0, 0] == pytest.approx(expected, rel=1e-12)
        assert proj.cov2d[0, 2] == pytest.approx(expected, rel=1e-12)
        assert proj.cov2d[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert proj.means2d[0] == pytest.approx([32.0, 32.0])
        assert proj.depths[0] == pytest.approx(2.0)

    def test_general_covariance_matches_direct_formula(self):
        rng = np.random.default_rng(3)
        gmap = random_map(rng, 8)
        pose = Pose(so3_exp(np.array([0.1, -0.2, 0.05])), np.array([0.1, 0.0, -0.2]))
        proj = project_gaussians(gmap, pose, INTR, CFG)
        rots, _, _ = rotation_matrices(gmap.rotations[proj.indices])
        for i in range(proj.indices.size):
            p = proj.p_cam[i]
            jac = np.array(
                [
                    [60.0 / p[2], 0.0, -60.0 * p[0] / p[2] ** 2],
                    [0.0, 60.0 / p[2], -60.0 * p[1] / p[2] ** 2],
                ]
            )
            s = np.exp(gmap.log_scales[proj.indices[i]])
            cov3 = rots[i] @ np.diag(s**2) @ rots[i].T
            u = jac @ pose.rotation
            cov2 = u @ cov3 @ u.T + CFG.dilation * np.eye(2)
            got = np.array(
                [[proj.cov2d[i, 0], proj.cov2d[i, 1]], [proj.cov2d[i, 1], proj.cov2d[i, 2]]]
            )
            np.testing.assert_allclose(got, cov2, rtol=1e-10, atol=1e-12)
            np.testing.assert_allclose(
                np.array([[proj.conics[i, 0], proj.conics[i, 1]], [proj.conics[i, 1], proj.conics[i, 2]]]),
                np.linalg.inv(cov2),
                rtol=1e-8,
            )

    def test_culling(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0))
        add_gaussian(gmap, (0.0, 0.0, -1.0))  # behind the camera
        add_gaussian(gmap, (0.0, 0.0, 0.005))  # inside the near plane
        add_gaussian(gmap, (0.5, 0.0, 3.0), opacity=1e-4)  # invisible
        proj = project_gaussians(gmap, Pose.identity(), INTR, CFG)
        assert proj.indices.tolist() == [0]

    def test_depth_order_is_stable_near_to_far(self):
        gmap = GaussianMap()
        for z in (3.0, 1.0, 2.0):
            add_gaussian(gmap, (0.0, 0.0, z))
        proj = project_gaussians(gmap, Pose.identity(), INTR, CFG)
        assert proj.depths[proj.order].tolist() == [1.0, 2.0, 3.0]


class TestRotationMatrices:
    def test_quarter_turn_about_z(self):
        rot, unit, norms = rotation_matrices(np.array([[np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)]]))
        np.testing.assert_allclose(rot[0], [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
        assert norms[0] == pytest.approx(1.0)

    def test_scaling_quaternion_changes_nothing(self):
        q = np.array([[0.3, -0.5, 0.7, 0.2]])
        r1, _, _ = rotation_matrices(q)
        r2, _, _ = rotation_matrices(3.7 * q)
        np.testing.assert_allclose(r1, r2, atol=1e-12)

    def test_orthonormal(self):
        rng = np.random.default_rng(0)
        rot, _, _ = rotation_matrices(rng.normal(size=(20, 4)))
        for r in rot:
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(r) == pytest.approx(1.0)


class TestCompositing:
    def test_empty_map_renders_background(self):
        out = render_map(GaussianMap(), Pose.identity(), INTR, CFG)
        assert not out.color.any()
        assert not out.depth.any()
        assert not out.alpha.any()

    def test_single_gaussian_center_pixel(self):
        # mean lands exactly on pixel (32, 32): alpha there equals opacity
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0), opacity=0.8, scale=0.1, color=(0.2, 0.4, 0.6))
        out = render_map(gmap, Pose.identity(), INTR, CFG)
        np.testing.assert_allclose(out.color[32, 32], 0.8 * np.array([0.2, 0.4, 0.6]), rtol=1e-12)
        assert out.depth[32, 32] == pytest.approx(0.8 * 2.0, rel=1e-12)
        assert out.alpha[32, 32] == pytest.approx(0.8, rel=1e-12)

    def test_two_gaussians_hand_composite(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 1.0), opacity=0.5, scale=0.05, color=(1.0, 0.0, 0.0))
        add_gaussian(gmap, (0.0, 0.0, 2.0), opacity=0.5, scale=0.1, color=(0.0, 1.0, 0.0))
        out = render_map(gmap, Pose.identity(), INTR, CFG)
        # front takes 0.5, back sees transmittance 0.5: weights 0.5 and 0.25
        np.testing.assert_allclose(out.color[32, 32], [0.5, 0.25, 0.0], rtol=1e-12)
        assert out.depth[32, 32] == pytest.approx(0.5 * 1.0 + 0.25 * 2.0, rel=1e-12)
        assert out.alpha[32, 32] == pytest.approx(0.75, rel=1e-12)

    def test_insertion_order_does_not_matter(self):
        rng = np.random.default_rng(11)
        gmap = random_map(rng, 15)
        out1 = render_map(gmap, Pose.identity(), INTR, CFG)
        perm = rng.permutation(len(gmap))
        shuffled = GaussianMap()
        shuffled.append(
            gmap.positions[perm],
            gmap.opacity_logits[perm],
            gmap.log_scales[perm],
            gmap.rotations[perm],
            gmap.colors[perm],
        )
        out2 = render_map(shuffled, Pose.identity(), INTR, CFG)
        np.testing.assert_allclose(out2.color, out1.color, atol=1e-12)
        np.testing.assert_allclose(out2.depth, out1.depth, atol=1e-12)

    def test_alpha_complements_transmittance(self):
        rng = np.random.default_rng(7)
        gmap = random_map(rng, 25)
        proj = project_gaussians(gmap, Pose.identity(), INTR, CFG)
        out = render_brute_force(proj, 64, 64, CFG)
        # accumulated weight plus surviving transmittance must be exactly 1
        ranked = proj.order
        trans = np.ones((64, 64))
        ys, xs = np.mgrid[0:64, 0:64]
        for i in ranked:
            dx = xs - proj.means2d[i, 0]
            dy = ys - proj.means2d[i, 1]
            m = 0.5 * (
                proj.conics[i, 0] * dx * dx
                + 2 * proj.conics[i, 1] * dx * dy
                + proj.conics[i, 2] * dy * dy
            )
            a_raw = proj.opacities[i] * np.exp(-m)
            a = np.where(a_raw < CFG.alpha_min, 0.0, np.minimum(a_raw, CFG.alpha_max))
            trans *= 1.0 - a
        np.testing.assert_allclose(out.alpha + trans, 1.0, atol=1e-10)

    def test_tiled_matches_brute_force(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            gmap = random_map(rng, int(rng.integers(3, 21)))
            axis = rng.normal(size=3)
            pose = Pose(so3_exp(0.05 * axis / np.linalg.norm(axis)), 0.05 * rng.normal(size=3))
            proj = project_gaussians(gmap, pose, INTR, CFG)
            tiled = render_tiled(proj, 64, 64, CFG)
            brute = render_brute_force(proj, 64, 64, CFG)
            assert np.abs(tiled.color - brute.color).max() < 1e-5
            assert np.abs(tiled.depth - brute.depth).max() < 1e-5
            assert np.abs(tiled.alpha - brute.alpha).max() < 1e-5

    def test_offscreen_gaussian_contributes_nothing(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0), opacity=0.7)
        base = render_map(gmap, Pose.identity(), INTR, CFG)
        add_gaussian(gmap, (50.0, 0.0, 2.0), opacity=0.9)
        out = render_map(gmap, Pose.identity(), INTR, CFG)
        np.testing.assert_array_equal(out.color, base.color)


class TestBackgroundDepth:
    def test_weak_coverage_reads_zero(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0), opacity=0.9, scale=0.05)
        depth = render_depth_for_background(gmap, Pose.identity(), INTR, CFG)
        assert depth[32, 32] == pytest.approx(0.9 * 2.0, rel=1e-9)
        assert depth[0, 0] == 0.0
        assert depth[63, 63] == 0.0

    def test_no_normalization_applied(self):
        # alpha 0.6 passes the threshold but the depth stays alpha-weighted
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 3.0), opacity=0.6, scale=0.2)
        depth = render_depth_for_background(gmap, Pose.identity(), INTR, CFG)
        assert depth[32, 32] == pytest.approx(0.6 * 3.0, rel=1e-9)


class TestMaskedLoss:
    def test_hand_value(self):
        color = np.zeros((4, 4, 3))
        target_color = np.full((4, 4, 3), 0.1)
        depth = np.zeros((4, 4))
        target_depth = np.full((4, 4), 0.2)
        static = np.ones((4, 4), dtype=bool)
        out = masked_l1_loss(color, depth, target_color, target_depth, static, 0.7)
        assert out.color_term == pytest.approx(0.1)
        assert out.depth_term == pytest.approx(0.2)
        assert out.total == pytest.approx(0.3 * 0.1 + 0.7 * 0.2)

    def test_color_counts_all_channels(self):
        color = np.zeros((1, 2, 3))
        color[0, 0] = [0.3, 0.0, 0.0]
        target = np.zeros((1, 2, 3))
        static = np.ones((1, 2), dtype=bool)
        out = masked_l1_loss(color, np.zeros((1, 2)), target, np.zeros((1, 2)), static, 0.0)
        assert out.color_term == pytest.approx(0.3 / 6.0)
        assert out.depth_term == 0.0  # no valid depth anywhere

    def test_invalid_depth_pixels_excluded(self):
        depth = np.array([[1.0, 5.0]])
        target_depth = np.array([[2.0, 0.0]])  # second pixel has no reading
        static = np.ones((1, 2), dtype=bool)
        out = masked_l1_loss(
            np.zeros((1, 2, 3)), depth, np.zeros((1, 2, 3)), target_depth, static, 1.0
        )
        assert out.depth_term == pytest.approx(1.0)
        assert out.n_depth == 1

    def test_empty_static_mask_raises(self):
        with pytest.raises(NoStaticPixels):
            masked_l1_loss(
                np.zeros((2, 2, 3)),
                np.zeros((2, 2)),
                np.zeros((2, 2, 3)),
                np.zeros((2, 2)),
                np.zeros((2, 2), dtype=bool),
            )


def training_frame(rng, intr=SMALL):
    target_color = rng.uniform(0.0, 1.0, size=(intr.height, intr.width, 3))
    target_depth = rng.uniform(0.5, 4.0, size=(intr.height, intr.width))
    target_depth[rng.uniform(size=target_depth.shape) < 0.1] = 0.0
    static = rng.uniform(size=(intr.height, intr.width)) < 0.85
    return target_color, target_depth, static


class TestGradients:
    def fd_check(self, gmap, pose, intr, tc, td, mask, step=1e-4, rel=1e-3):
        _, grads = loss_and_gradients(gmap, pose, intr, tc, td, mask, CFG, 0.7)
        checked = 0
        for name in GaussianMap.PARAM_NAMES:
            arr = getattr(gmap, name)
            g = getattr(grads, name)
            for flat in range(arr.size):
                orig = arr.flat[flat]
                arr.flat[flat] = orig + step
                lp = loss_and_gradients(gmap, pose, intr, tc, td, mask, CFG, 0.7)[0].total
                arr.flat[flat] = orig - step
                lm = loss_and_gradients(gmap, pose, intr, tc, td, mask, CFG, 0.7)[0].total
                arr.flat[flat] = orig
                fd = (lp - lm) / (2.0 * step)
                analytic = g.flat[flat]
                err = abs(analytic - fd)
                scale = max(abs(analytic), abs(fd))
                assert err <= rel * scale + 1e-7, (
                    f"{name}[{flat}]: analytic {analytic:.8g} vs fd {fd:.8g}"
                )
                checked += 1
        return checked

    def test_finite_difference_all_parameters(self):
        rng = np.random.default_rng(5)
        gmap = random_map(rng, 5, intr=SMALL, z_range=(1.0, 3.0))
        pose = Pose(so3_exp(np.array([0.02, -0.01, 0.03])), np.array([0.05, -0.02, 0.01]))
        tc, td, mask = training_frame(rng)
        checked = self.fd_check(gmap, pose, SMALL, tc, td, mask)
        assert checked == 5 * 14

    def test_finite_difference_unit_quaternions(self):
        # unit quaternions sit exactly on the normalization manifold, the
        # spot where a missing projection term would show up
        rng = np.random.default_rng(10)
        gmap = random_map(rng, 4, intr=SMALL, z_range=(1.0, 3.0), unit_quats=True)
        tc, td, mask = training_frame(rng)
        self.fd_check(gmap, Pose.identity(), SMALL, tc, td, mask)

    def test_dynamic_region_fully_isolated(self):
        rng = np.random.default_rng(13)
        gmap = random_map(rng, 6, intr=SMALL)
        tc, td, mask = training_frame(rng)
        loss1, grads1 = loss_and_gradients(gmap, Pose.identity(), SMALL, tc, td, mask, CFG)
        tc2 = tc.copy()
        td2 = td.copy()
        tc2[~mask] = rng.uniform(size=(int((~mask).sum()), 3))
        td2[~mask] = 9.0
        loss2, grads2 = loss_and_gradients(gmap, Pose.identity(), SMALL, tc2, td2, mask, CFG)
        assert loss1.total == loss2.total
        for name in GaussianMap.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(grads1, name), getattr(grads2, name))

    def test_empty_mask_raises_before_rendering(self):
        rng = np.random.default_rng(1)
        gmap = random_map(rng, 3, intr=SMALL)
        tc, td, _ = training_frame(rng)
        with pytest.raises(NoStaticPixels):
            loss_and_gradients(
                gmap, Pose.identity(), SMALL, tc, td, np.zeros_like(td, dtype=bool), CFG
            )

    def test_invisible_gaussian_gets_zero_gradient(self):
        rng = np.random.default_rng(2)
        gmap = random_map(rng, 3, intr=SMALL)
        add_gaussian(gmap, (0.0, 0.0, -2.0))  # behind the camera
        tc, td, mask = training_frame(rng)
        _, grads = loss_and_gradients(gmap, Pose.identity(), SMALL, tc, td, mask, CFG)
        assert not grads.positions[3].any()
        assert grads.opacity_logits[3] == 0.0
        assert not grads.colors[3].any()

    def test_too_bright_color_has_positive_gradient(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0), opacity=0.9, scale=0.3, color=(1.0, 1.0, 1.0))
        target_color = np.zeros((32, 32, 3))
        target_depth = np.zeros((32, 32))
        static = np.ones((32, 32), dtype=bool)
        _, grads = loss_and_gradients(
            gmap, Pose.identity(), SMALL, target_color, target_depth, static, CFG
        )
        assert (grads.colors[0] > 0).all()


class TestInsertion:
    def test_each_seed_brings_densified_companions(self):
        gmap = GaussianMap()
        cfg = MapConfig()
        rng = np.random.default_rng(0)
        n = insert_from_features(
            gmap,
            np.array([[16.0, 16.0]]),
            np.array([2.0]),
            np.array([[0.5, 0.5, 0.5]]),
            Pose.identity(),
            SMALL,
            rng,
            cfg,
        )
        assert n == 1
        assert len(gmap) == 1 + cfg.n_densify
        np.testing.assert_allclose(gmap.positions[0], [0.0, 0.0, 2.0], atol=1e-12)
        # companions stay inside the densification ball and start dimmer
        dist = np.linalg.norm(gmap.positions[1:] - gmap.positions[0], axis=1)
        assert (dist <= cfg.densify_radius_factor * cfg.base_radius + 1e-12).all()
        ops = gmap.opacities()
        assert ops[0] == pytest.approx(cfg.insert_opacity)
        np.testing.assert_allclose(ops[1:], cfg.densify_opacity, rtol=1e-12)

    def test_duplicate_feature_rejected(self):
        gmap = GaussianMap()
        cfg = MapConfig()
        rng = np.random.default_rng(0)
        args = (
            np.array([[16.0, 16.0]]),
            np.array([2.0]),
            np.array([[0.5, 0.5, 0.5]]),
            Pose.identity(),
            SMALL,
            rng,
            cfg,
        )
        assert insert_from_features(gmap, *args) == 1
        before = len(gmap)
        assert insert_from_features(gmap, *args) == 0
        assert len(gmap) == before

    def test_batch_deduplicates_against_itself(self):
        gmap = GaussianMap()
        cfg = MapConfig()
        rng = np.random.default_rng(0)
        # two pixels that unproject 0.005 m apart, well within the radius
        pixels = np.array([[16.0, 16.0], [16.1, 16.0]])
        n = insert_from_features(
            gmap,
            pixels,
            np.array([2.0, 2.0]),
            np.full((2, 3), 0.5),
            Pose.identity(),
            SMALL,
            rng,
            cfg,
        )
        assert n == 1

    def test_separated_features_both_accepted(self):
        gmap = GaussianMap()
        cfg = MapConfig()
        rng = np.random.default_rng(0)
        n = insert_from_features(
            gmap,
            np.array([[8.0, 16.0], [24.0, 16.0]]),
            np.array([2.0, 2.0]),
            np.full((2, 3), 0.5),
            Pose.identity(),
            SMALL,
            rng,
            cfg,
        )
        assert n == 2
        assert len(gmap) == 2 * (1 + cfg.n_densify)

    def test_invalid_depths_skipped(self):
        gmap = GaussianMap()
        rng = np.random.default_rng(0)
        n = insert_from_features(
            gmap,
            np.array([[16.0, 16.0], [10.0, 10.0]]),
            np.array([0.0, -1.0]),
            np.full((2, 3), 0.5),
            Pose.identity(),
            SMALL,
            rng,
            MapConfig(),
        )
        assert n == 0
        assert len(gmap) == 0


class TestPruning:
    def test_prune_removes_faint_and_compacts_state(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0), opacity=0.9)
        add_gaussian(gmap, (0.1, 0.0, 2.0), opacity=0.01)
        add_gaussian(gmap, (-0.1, 0.0, 2.0), opacity=0.8)
        gmap.moments["positions"] = (np.arange(9.0).reshape(3, 3), np.zeros((3, 3)))
        removed = prune(gmap, 0.05)
        assert removed == 1
        assert len(gmap) == 2
        np.testing.assert_allclose(gmap.positions[:, 0], [0.0, -0.1])
        m, v = gmap.moments["positions"]
        assert m.shape == (2, 3)
        np.testing.assert_allclose(m[:, 0], [0.0, 6.0])

    def test_append_pads_moment_state(self):
        gmap = GaussianMap()
        add_gaussian(gmap, (0.0, 0.0, 2.0))
        gmap.moments["colors"] = (np.ones((1, 3)), np.ones((1, 3)))
        add_gaussian(gmap, (0.1, 0.0, 2.0))
        m, v = gmap.moments["colors"]
        assert m.shape == (2, 3)
        assert not m[1].any()


class TestSerialization:
    def test_binary_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        gmap = random_map(rng, 30)
        path = tmp_path / "map.bin"
        save_map(gmap, path)
        loaded = load_map(path)
        assert len(loaded) == 30
        np.testing.assert_allclose(loaded.positions, gmap.positions, rtol=1e-6, atol=1e-6)
        np.testing.assert_allclose(loaded.opacities(), gmap.opacities(), rtol=1e-5)
        np.testing.assert_allclose(
            np.exp(loaded.log_scales), np.exp(gmap.log_scales), rtol=1e-5
        )
        np.testing.assert_allclose(loaded.colors, gmap.colors, rtol=1e-5, atol=1e-6)
        # quaternions only matter up to sign and scale: compare rotations
        r1, _, _ = rotation_matrices(gmap.rotations)
        r2, _, _ = rotation_matrices(loaded.rotations)
        np.testing.assert_allclose(r1, r2, atol=1e-5)

    def test_text_round_trip(self, tmp_path):
        rng = np.random.default_rng(19)
        gmap = random_map(rng, 7)
        path = tmp_path / "map.txt"
        save_map_text(gmap, path)
        loaded = load_map_text(path)
        assert len(loaded) == 7
        np.testing.assert_allclose(loaded.positions, gmap.positions, rtol=1e-7, atol=1e-8)

    def test_render_survives_round_trip(self, tmp_path):
        rng = np.random.default_rng(23)
        gmap = random_map(rng, 12)
        path = tmp_path / "map.bin"
        save_map(gmap, path)
        out1 = render_map(gmap, Pose.identity(), INTR, CFG)
        out2 = render_map(load_map(path), Pose.identity(), INTR, CFG)
        assert np.abs(out1.color - out2.color).max() < 1e-4

    def test_empty_map_round_trip(self, tmp_path):
        path = tmp_path / "empty.bin"
        save_map(GaussianMap(), path)
        assert len(load_map(path)) == 0

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(MapFormatError):
            load_map(path)

    def test_truncated_file_rejected(self, tmp_path):
        rng = np.random.default_rng(29)
        gmap = random_map(rng, 4)
        path = tmp_path / "map.bin"
        save_map(gmap, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-10])
        with pytest.raises(MapFormatError):
            load_map(path)

    def test_wrong_column_count_text_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("1 2 3 4 5\n")
        with pytest.raises(MapFormatError):
            load_map_text(path)


class TestOptimization:
    def make_keyframe(self, gmap, pose=None, intr=SMALL):
        pose = pose or Pose.identity()
        out = render_map(gmap, pose, intr, CFG)
        static = np.ones((intr.height, intr.width), dtype=bool)
        return Keyframe(0, pose, out.color, out.depth, static)

    def test_color_recovery(self):
        rng = np.random.default_rng(31)
        truth = random_map(rng, 20, intr=SMALL, z_range=(1.5, 3.0))
        truth.opacity_logits[:] = logit(0.9)
        kf = self.make_keyframe(truth)
        working = truth.copy()
        working.colors = np.clip(
            working.colors + rng.uniform(-0.15, 0.15, size=working.colors.shape), 0.0, 1.0
        )
        start = np.abs(render_map(working, kf.pose, SMALL, CFG).color - kf.color).mean()
        optimize_map(
            working,
            [kf],
            SMALL,
            rng,
            OptimizeConfig(iterations=500),
            CFG,
            MapConfig(),
        )
        end = np.abs(render_map(working, kf.pose, SMALL, CFG).color - kf.color).mean()
        assert end < 0.2 * start

    def test_sgd_also_descends(self):
        rng = np.random.default_rng(37)
        truth = random_map(rng, 10, intr=SMALL, z_range=(1.5, 3.0))
        truth.opacity_logits[:] = logit(0.9)
        kf = self.make_keyframe(truth)
        working = truth.copy()
        working.colors = np.clip(working.colors + 0.1, 0.0, 1.0)
        result = optimize_map(
            working,
            [kf],
            SMALL,
            rng,
            OptimizeConfig(iterations=200, method="sgd", lr_color=0.5),
            CFG,
            MapConfig(),
        )
        assert result.losses[-1] < result.losses[0]

    def test_unknown_method_rejected(self):
        rng = np.random.default_rng(0)
        gmap = random_map(rng, 3, intr=SMALL)
        kf = self.make_keyframe(gmap)
        with pytest.raises(ValueError):
            optimize_map(
                gmap, [kf], SMALL, rng, OptimizeConfig(iterations=1, method="momentum"),
                CFG, MapConfig(),
            )

    def test_prune_cadence_follows_global_step_count(self):
        rng = np.random.default_rng(41)
        gmap = random_map(rng, 8, intr=SMALL, z_range=(1.5, 3.0))
        gmap.opacity_logits[:] = logit(0.9)
        gmap.opacity_logits[3] = logit(0.02)
        kf = self.make_keyframe(gmap)
        cfg = OptimizeConfig(iterations=99, method="sgd")
        optimize_map(gmap, [kf], SMALL, rng, cfg, CFG, MapConfig())
        assert len(gmap) == 8  # not yet at the pruning step
        result = optimize_map(
            gmap, [kf], SMALL, rng, OptimizeConfig(iterations=1, method="sgd"), CFG, MapConfig()
        )
        assert gmap.step_count == 100
        assert result.n_pruned >= 1
        assert len(gmap) < 8

    def test_empty_static_masks_are_skipped_and_counted(self):
        rng = np.random.default_rng(43)
        gmap = random_map(rng, 5, intr=SMALL)
        kf = self.make_keyframe(gmap)
        kf.static_mask = np.zeros_like(kf.static_mask)
        result = optimize_map(
            gmap, [kf], SMALL, rng, OptimizeConfig(iterations=10), CFG, MapConfig()
        )
        assert result.n_skipped == 10
        assert not result.losses

    def test_constraints_hold_after_optimization(self):
        rng = np.random.default_rng(47)
        truth = random_map(rng, 15, intr=SMALL, z_range=(1.5, 3.0))
        kf = self.make_keyframe(truth)
        working = truth.copy()
        working.positions += rng.normal(scale=0.02, size=working.positions.shape)
        optimize_map(
            working, [kf], SMALL, rng, OptimizeConfig(iterations=50), CFG, MapConfig()
        )
        assert working.colors.min() >= 0.0 and working.colors.max() <= 1.0
        np.testing.assert_allclose(np.linalg.norm(working.rotations, axis=1), 1.0, atol=1e-9)
        assert np.exp(working.log_scales).max() <= 10.0

    def test_window_keeps_newest_and_draws_older(self):
        rng = np.random.default_rng(53)
        frames = [
            Keyframe(i, Pose.identity(), np.zeros((2, 2, 3)), np.zeros((2, 2)), np.ones((2, 2), bool))
            for i in range(20)
        ]
        window = select_window(frames, rng, 8)
        assert len(window) == 8
        assert window[0].frame_index == 19
        indices = [kf.frame_index for kf in window]
        assert len(set(indices)) == 8
        assert all(i < 19 for i in indices[1:])

    def test_window_smaller_than_limit_takes_everything(self):
        rng = np.random.default_rng(0)
        frames = [
            Keyframe(i, Pose.identity(), np.zeros((2, 2, 3)), np.zeros((2, 2)), np.ones((2, 2), bool))
            for i in range(3)
        ]
        assert len(select_window(frames, rng, 8)) == 3
