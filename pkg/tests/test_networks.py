import math

import numpy as np
import pytest

from stereobev.errors import InvalidConfigError, RigMismatchError, ShapeMismatchError
from stereobev.geometry import CameraRig
from stereobev.networks import (
    NetworkConfig,
    StereoBevModel,
    build_plume,
    config_from_dict,
    config_to_dict,
    detection_plan,
    image_feature_fusion,
    plan_diff,
    reference_plan,
    shape_plan,
)
from stereobev.tensor import Tensor
from stereobev.voxelgrid import VoxelGridSpec, voxel_centers

TOY_GRID = VoxelGridSpec((-1.6, 1.6), (-0.4, 0.4), (2.0, 5.2), 0.2)  # 16 x 4 x 16
TOY_RIG = CameraRig(fx=40.0, fy=40.0, cx=16.0, cy=16.0, baseline=0.3, image_w=32, image_h=32)


def toy_config(**overrides):
    defaults = dict(variant="small", scale=0.25, grid=TOY_GRID)
    defaults.update(overrides)
    return NetworkConfig(**defaults)


def oracle_plume(left, right, spec, rig, concat_coords=False, require_both=True):
    """Independent per-voxel projection + interpolation, written from the math."""
    c, h, w = left.shape
    X, Y, Z = spec.dims
    total = 2 * c + (3 if concat_coords else 0)
    out = np.zeros((total, X, Y, Z))

    def interp(fmap, u, v):
        x0, y0 = math.floor(u), math.floor(v)
        fu, fv = u - x0, v - y0
        acc = np.zeros(fmap.shape[0])
        for dy, dx, wgt in (
            (0, 0, (1 - fu) * (1 - fv)),
            (0, 1, fu * (1 - fv)),
            (1, 0, (1 - fu) * fv),
            (1, 1, fu * fv),
        ):
            yy, xx = y0 + dy, x0 + dx
            if 0 <= xx < w and 0 <= yy < h:
                acc += wgt * fmap[:, yy, xx]
        return acc

    res = spec.resolution
    for i in range(X):
        for j in range(Y):
            for k in range(Z):
                cx = spec.x_range[0] + (i + 0.5) * res
                cy = spec.y_range[0] + (j + 0.5) * res
                cz = spec.z_range[0] + (k + 0.5) * res
                if cz <= 0:
                    continue
                u = rig.fx * cx / cz + rig.cx
                v = rig.fy * cy / cz + rig.cy
                ur = u - rig.fx * rig.baseline / cz
                if not (0 <= u <= rig.image_w - 1 and 0 <= v <= rig.image_h - 1):
                    continue
                if require_both and not (0 <= ur <= rig.image_w - 1):
                    continue
                out[:c, i, j, k] = interp(left, u, v)
                out[c : 2 * c, i, j, k] = interp(right, ur, v)
                if concat_coords:
                    out[2 * c :, i, j, k] = (cx, cy, cz)
    return out


class TestShapePlan:
    @pytest.mark.parametrize("variant", ["small", "middle", "large"])
    def test_matches_reference_table(self, variant):
        cfg = NetworkConfig(variant=variant)
        assert plan_diff(shape_plan(cfg), reference_plan(variant)) == []

    def test_plume_is_64_channels_at_full_scale(self):
        for variant in ("small", "middle", "large"):
            plan = {r.name: r for r in shape_plan(NetworkConfig(variant=variant))}
            assert str(plan["plume"].dims[0]) == "64"

    def test_voxel_coordinates_add_three_channels(self):
        plan = {r.name: r for r in shape_plan(NetworkConfig(concat_voxel_coords=True))}
        assert str(plan["plume"].dims[0]) == "67"

    def test_quarter_mode_outputs_at_quarter_resolution(self):
        plan = shape_plan(NetworkConfig(image_feature_resolution="quarter"))
        last_image_row = [r for r in plan if r.name == "dropout"][0]
        assert [str(d) for d in last_image_row.dims[1:]] == ["H/4", "W/4"]

    def test_concrete_plan_matches_execution(self):
        cfg = toy_config()
        model = StereoBevModel(cfg, seed=3)
        rng = np.random.default_rng(0)
        left = Tensor(rng.uniform(size=(3, 32, 32)))
        right = Tensor(rng.uniform(size=(3, 32, 32)))
        out = model.forward(left, right, TOY_RIG)
        plan = {r.name: tuple(d.val for d in r.dims) for r in shape_plan(cfg, 32, 32)}
        feats = model.stereo_features(Tensor(left.data), Tensor(right.data))[0]
        assert tuple(feats.shape) == plan["fpn_conv"]
        assert tuple(out.volume.values.shape) == plan["plume"]
        assert tuple(out.occupancy.values.shape) == TOY_GRID.dims
        assert tuple(out.bev_features.shape) == plan["bev_deconv5"]

    def test_invalid_config_rejected(self):
        with pytest.raises(InvalidConfigError):
            NetworkConfig(variant="tiny")
        with pytest.raises(InvalidConfigError):
            NetworkConfig(volume_net="dense")
        with pytest.raises(InvalidConfigError):
            config_from_dict({"variant": "small", "widht": 3})

    def test_config_dict_round_trip(self):
        cfg = toy_config(fusion_enabled=True, volume_net="bev_only", scale=0.5)
        assert config_from_dict(config_to_dict(cfg)) == cfg


class TestStereoNetFullScale:
    def test_small_variant_output_is_32_by_input_resolution(self):
        cfg = NetworkConfig(variant="small")
        model = StereoBevModel(cfg, seed=0)
        image = Tensor(np.random.default_rng(1).uniform(size=(3, 64, 128)))
        out = model.stereo.forward(image)
        assert out.shape == (32, 64, 128)

    def test_half_mode_output_carries_pyramid_width(self):
        cfg = NetworkConfig(variant="small", image_feature_resolution="half")
        model = StereoBevModel(cfg, seed=0)
        image = Tensor(np.random.default_rng(2).uniform(size=(3, 64, 128)))
        out = model.stereo.forward(image)
        assert out.shape == (32, 32, 64)

    def test_indivisible_image_rejected(self):
        model = StereoBevModel(toy_config(), seed=0)
        with pytest.raises(ShapeMismatchError):
            model.stereo.forward(Tensor(np.zeros((3, 30, 32))))


class TestBuildPlume:
    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(3):
            spec = VoxelGridSpec((-1.2, 1.2), (-0.3, 0.3), (1.0, 3.4), 0.4)  # 6 x 2 x 6
            rig = CameraRig(
                fx=rng.uniform(15, 40),
                fy=rng.uniform(15, 40),
                cx=rng.uniform(8, 16),
                cy=rng.uniform(6, 12),
                baseline=rng.uniform(0.1, 0.6),
                image_w=24,
                image_h=20,
            )
            left = rng.normal(size=(4, 20, 24))
            right = rng.normal(size=(4, 20, 24))
            concat_coords = trial % 2 == 0
            got = build_plume(Tensor(left), Tensor(right), spec, rig, concat_voxel_coords=concat_coords)
            want = oracle_plume(left, right, spec, rig, concat_coords=concat_coords)
            assert np.max(np.abs(got.values.data - want)) < 1e-12

    def test_integer_pixel_voxel_equals_pixel_concat(self):
        # rig engineered so one voxel center projects to exact integer pixels
        spec = VoxelGridSpec((0.0, 2.0), (0.0, 1.0), (1.0, 3.0), 1.0)
        # center of voxel (0,0,0) = (0.5, 0.5, 1.5); pick fx so u,v integers
        rig = CameraRig(fx=6.0, fy=6.0, cx=3.0, cy=4.0, baseline=0.5, image_w=12, image_h=10)
        # u = 6*0.5/1.5 + 3 = 5, v = 6*0.5/1.5 + 4 = 6, ur = 5 - 6*0.5/1.5 = 3
        rng = np.random.default_rng(6)
        left = rng.normal(size=(3, 10, 12))
        right = rng.normal(size=(3, 10, 12))
        vol = build_plume(Tensor(left), Tensor(right), spec, rig).values.data
        assert np.array_equal(vol[:3, 0, 0, 0], left[:, 6, 5])
        assert np.array_equal(vol[3:, 0, 0, 0], right[:, 6, 3])

    def test_voxel_behind_camera_is_zero(self):
        spec = VoxelGridSpec((-0.5, 0.5), (-0.5, 0.5), (-2.0, 2.0), 1.0)
        rng = np.random.default_rng(7)
        left = Tensor(rng.normal(size=(2, 8, 8)))
        right = Tensor(rng.normal(size=(2, 8, 8)))
        rig = CameraRig(fx=4.0, fy=4.0, cx=4.0, cy=4.0, baseline=0.2, image_w=8, image_h=8)
        vol = build_plume(left, right, spec, rig, concat_voxel_coords=True).values.data
        assert np.array_equal(vol[:, :, :, 0], np.zeros_like(vol[:, :, :, 0]))
        assert np.array_equal(vol[:, :, :, 1], np.zeros_like(vol[:, :, :, 1]))

    def test_rig_mismatch_rejected(self):
        left = Tensor(np.zeros((2, 8, 8)))
        with pytest.raises(RigMismatchError):
            build_plume(left, left, TOY_GRID, TOY_RIG)  # rig says 32x32

    def test_feature_depends_only_on_bilinear_footprint(self):
        spec = VoxelGridSpec((-0.4, 0.4), (-0.4, 0.4), (1.0, 1.8), 0.8)  # single voxel
        rig = CameraRig(fx=10.0, fy=10.0, cx=8.0, cy=8.0, baseline=0.3, image_w=16, image_h=16)
        rng = np.random.default_rng(8)
        left = rng.normal(size=(2, 16, 16))
        right = rng.normal(size=(2, 16, 16))
        base = build_plume(Tensor(left.copy()), Tensor(right.copy()), spec, rig).values.data
        # locate the 2x2 footprints, then perturb everything else
        u = rig.fx * 0.0 / 1.4 + rig.cx
        v = rig.fy * 0.0 / 1.4 + rig.cy
        ur = u - rig.fx * rig.baseline / 1.4
        keep = np.zeros((16, 16), dtype=bool)
        for uu in (u, ur):
            x0, y0 = math.floor(uu), math.floor(v)
            keep[y0 : y0 + 2, x0 : x0 + 2] = True
        left2 = left + rng.normal(size=left.shape) * ~keep
        right2 = right + rng.normal(size=right.shape) * ~keep
        again = build_plume(Tensor(left2), Tensor(right2), spec, rig).values.data
        assert np.array_equal(base, again)

    def test_translating_grid_one_voxel_shifts_output(self):
        spec = VoxelGridSpec((-1.2, 1.2), (-0.3, 0.3), (1.6, 4.0), 0.4)
        moved = spec.translated(dx=spec.resolution)
        rig = CameraRig(fx=30.0, fy=30.0, cx=12.0, cy=10.0, baseline=0.4, image_w=24, image_h=20)
        rng = np.random.default_rng(9)
        left = Tensor(rng.normal(size=(3, 20, 24)))
        right = Tensor(rng.normal(size=(3, 20, 24)))
        base = build_plume(left, right, spec, rig).values.data
        shifted = build_plume(left, right, moved, rig).values.data
        from stereobev.geometry import fov_mask_points

        both_visible = (
            fov_mask_points(rig, voxel_centers(spec).reshape(-1, 3)).reshape(spec.dims)[1:]
            & fov_mask_points(rig, voxel_centers(moved).reshape(-1, 3)).reshape(moved.dims)[:-1]
        )
        # voxel i of the moved grid covers the same metric cell as voxel i+1 of the base
        diff = np.abs(shifted[:, :-1] - base[:, 1:]).max(axis=0)
        assert np.max(diff[both_visible]) < 1e-12


class TestFusion:
    def _setup(self, seed=10):
        rng = np.random.default_rng(seed)
        spec = VoxelGridSpec((-1.2, 1.2), (-0.3, 0.3), (1.0, 3.4), 0.4)
        rig = CameraRig(fx=25.0, fy=25.0, cx=12.0, cy=10.0, baseline=0.3, image_w=24, image_h=20)
        left = rng.normal(size=(3, 20, 24))
        right = rng.normal(size=(3, 20, 24))
        bev = Tensor(rng.normal(size=(5,) + (spec.dims[0], spec.dims[2])))
        return spec, rig, left, right, bev

    def test_zero_occupancy_gives_zero_extra_channels(self):
        spec, rig, left, right, bev = self._setup()
        occ = np.zeros(spec.dims)
        fused = image_feature_fusion(Tensor(left), Tensor(right), occ, bev, spec, rig)
        assert fused.shape[0] == 5 + 6
        assert np.array_equal(fused.data[:5], bev.data)
        assert np.array_equal(fused.data[5:], np.zeros_like(fused.data[5:]))

    def test_one_hot_occupancy_selects_single_voxel_feature(self):
        spec, rig, left, right, bev = self._setup(11)
        vol = build_plume(Tensor(left), Tensor(right), spec, rig).values.data
        occ = np.zeros(spec.dims)
        occ[2, 1, 3] = 1.0
        fused = image_feature_fusion(Tensor(left), Tensor(right), occ, bev, spec, rig).data
        assert np.allclose(fused[5:, 2, 3], vol[:, 2, 1, 3], atol=1e-15)
        rest = fused[5:].copy()
        rest[:, 2, 3] = 0.0
        assert np.array_equal(rest, np.zeros_like(rest))

    def test_matches_brute_force_weighted_sum(self):
        spec, rig, left, right, bev = self._setup(12)
        rng = np.random.default_rng(13)
        occ = rng.uniform(size=spec.dims)
        fused = image_feature_fusion(Tensor(left), Tensor(right), occ, bev, spec, rig).data
        vol = oracle_plume(left, right, spec, rig)
        expected = np.einsum("cxyz,xyz->cxz", vol, occ)
        assert np.max(np.abs(fused[5:] - expected)) < 1e-12


class TestDetectionHead:
    def test_block_plans(self):
        assert detection_plan(NetworkConfig(variant="small")) == {
            "layers": (2, 3, 6, 6, 3),
            "channels": (32, 96, 128, 192, 192),
            "encoder_downsample": 16,
            "output_stride": 4,
        }
        assert detection_plan(NetworkConfig(variant="middle"))["channels"] == (32, 96, 192, 256, 384)
        large = detection_plan(NetworkConfig(variant="large"))
        assert large["layers"] == (3, 3, 6, 6, 3)
        assert large["channels"] == (48, 128, 192, 256, 384)

    def test_stride_four_output_and_sixteenth_bottom(self):
        cfg = toy_config()
        model = StereoBevModel(cfg, seed=1)
        rng = np.random.default_rng(3)
        bev = Tensor(rng.normal(size=(model.volume_net.out_channels, 16, 16)))
        head = model.detection_head
        cls_logits, reg = head(bev)
        assert cls_logits.shape == (1, 4, 4)
        assert reg.shape == (6, 4, 4)
        c5 = head.block5(head.block4(head.block3(head.block2(head.block1(bev)))))
        assert tuple(c5.shape[1:]) == (1, 1)  # 16 / 16

    def test_full_grid_output_dims(self):
        # 320 x 304 grid -> stride-4 maps of 80 x 76
        plan = shape_plan(NetworkConfig(), 64, 64)
        X, Z = NetworkConfig().grid.dims[0], NetworkConfig().grid.dims[2]
        assert (X // 4, Z // 4) == (80, 76)
        assert (X // 16, Z // 16) == (20, 19)


class TestModelBehavior:
    def test_deterministic_forward(self):
        cfg = toy_config()
        rng = np.random.default_rng(4)
        left = Tensor(rng.uniform(size=(3, 32, 32)))
        right = Tensor(rng.uniform(size=(3, 32, 32)))

        def run():
            model = StereoBevModel(cfg, seed=9)
            out = model.forward(Tensor(left.data.copy()), Tensor(right.data.copy()), TOY_RIG)
            return out.occupancy.values.data.copy(), out.cls_logits.data.copy()

        a, b = run(), run()
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])

    def test_batch_permutation_equivariance(self):
        cfg = toy_config()
        model = StereoBevModel(cfg, seed=2)
        rng = np.random.default_rng(5)
        samples = [
            (Tensor(rng.uniform(size=(3, 32, 32))), Tensor(rng.uniform(size=(3, 32, 32))))
            for _ in range(2)
        ]
        fwd = [model.forward(l, r, TOY_RIG).cls_logits.data.copy() for l, r in samples]
        rev = [model.forward(l, r, TOY_RIG).cls_logits.data.copy() for l, r in samples[::-1]]
        assert np.array_equal(fwd[0], rev[1])
        assert np.array_equal(fwd[1], rev[0])

    def test_zeroed_occupancy_head_predicts_half(self):
        cfg = toy_config()
        model = StereoBevModel(cfg, seed=3)
        for _, tensor in model.occupancy_head.named_params("occ"):
            tensor.data[:] = 0.0
        rng = np.random.default_rng(6)
        bev = Tensor(rng.normal(size=(model.volume_net.out_channels, 16, 16)))
        grid = model.occupancy_head(bev, np.ones(TOY_GRID.dims, bool))
        assert np.allclose(grid.values.data, 0.5)

    def test_unshared_stereo_weights(self):
        cfg = toy_config(share_stereo_weights=False)
        model = StereoBevModel(cfg, seed=4)
        names = model.params()
        assert any(name.startswith("stereo_right.") for name in names)
        rng = np.random.default_rng(7)
        image = Tensor(rng.uniform(size=(3, 32, 32)))
        lf, rf = model.stereo_features(image, Tensor(image.data.copy()))
        assert not np.allclose(lf.data, rf.data)

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = toy_config()
        model = StereoBevModel(cfg, seed=5)
        path = tmp_path / "weights.ckpt"
        model.save(path)
        other = StereoBevModel(cfg, seed=99)
        other.load(path)
        rng = np.random.default_rng(8)
        left = Tensor(rng.uniform(size=(3, 32, 32)))
        right = Tensor(rng.uniform(size=(3, 32, 32)))
        a = model.forward(Tensor(left.data.copy()), Tensor(right.data.copy()), TOY_RIG)
        b = other.forward(Tensor(left.data.copy()), Tensor(right.data.copy()), TOY_RIG)
        # float32 storage rounds the weights, so reload the saver too
        model.load(path)
        c = model.forward(Tensor(left.data.copy()), Tensor(right.data.copy()), TOY_RIG)
        assert np.array_equal(b.cls_logits.data, c.cls_logits.data)
