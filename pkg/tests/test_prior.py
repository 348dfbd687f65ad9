import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from evoscene.backends.base import DepthEstimate, DepthEstimator
from evoscene.errors import ContractError, GeometryError, NoDataError
from evoscene.geometry import CameraIntrinsics, CameraPose, DepthMap
from evoscene.prior import (
    ConfidencePointCloud,
    VotingConfig,
    candidates_from_view,
    initial_prior,
    merge_point_clouds,
    multi_view_filter,
    prior_from_estimate,
    read_ply,
    select_supported,
    tally_votes,
    write_ply,
)
from evoscene.views import ViewEntry, ViewSet

SIZE = 16


def flat_view(view_id: str, depth: float):
    """Vista identidad sobre un plano frontal a profundidad constante."""
    K = CameraIntrinsics.from_fov(SIZE, SIZE, 60.0)
    image = np.full((SIZE, SIZE, 3), 0.25)
    view = ViewEntry(view_id, image, K, CameraPose.identity())
    return view, DepthMap.from_array(np.full((SIZE, SIZE), depth))


def test_candidates_carry_pixel_colors_and_unit_support():
    view, depth = flat_view("a", 2.0)
    view.image[3, 5] = [1.0, 0.0, 0.0]

    cloud = candidates_from_view(view, depth)

    assert len(cloud) == SIZE * SIZE
    assert np.all(cloud.support == 1)
    assert set(cloud.source_view) == {"a"}
    np.testing.assert_allclose(cloud.confidence, 1.0)
    red = np.flatnonzero(np.all(cloud.colors == [1.0, 0.0, 0.0], axis=1))
    assert len(red) == 1


def test_votes_abstentions_and_contradictions():
    a, da = flat_view("a", 2.0)
    b, db = flat_view("b", 2.0)
    c, dc = flat_view("c", 1.0)
    d, dd = flat_view("d", 3.0)
    views = ViewSet([a, b, c, d])
    depths = {"a": da, "b": db, "c": dc, "d": dd}
    candidates = candidates_from_view(a, da)

    tally = tally_votes(candidates, views, depths, VotingConfig(min_support=2))

    assert np.all(tally.votes == 2)
    assert np.all(tally.abstentions == 1)
    assert np.all(tally.contradictions == 1)
    summary = tally.summary(retained=len(candidates))
    assert summary["retained_fraction"] == 1.0


def test_min_support_controls_retention():
    a, da = flat_view("a", 2.0)
    b, db = flat_view("b", 2.0)
    views = ViewSet([a, b])
    depths = {"a": da, "b": db}
    candidates = candidates_from_view(a, da)

    kept = multi_view_filter(candidates, views, depths, VotingConfig(min_support=2))
    assert len(kept) == len(candidates)
    assert np.all(kept.support == 2)

    assert len(multi_view_filter(candidates, views, depths, VotingConfig(min_support=3))) == 0


def test_gradient_support_mode_scales_confidence():
    a, da = flat_view("a", 2.0)
    b, db = flat_view("b", 2.0)
    d, dd = flat_view("d", 3.0)
    views = ViewSet([a, b, d])
    depths = {"a": da, "b": db, "d": dd}
    candidates = candidates_from_view(a, da)
    cfg = VotingConfig(min_support=2, confidence_mode="gradient_support")

    kept = select_supported(candidates, tally_votes(candidates, views, depths, cfg), cfg)

    np.testing.assert_allclose(kept.confidence, 2.0 / 3.0)


def test_tally_requires_views_and_known_sources():
    a, da = flat_view("a", 2.0)
    candidates = candidates_from_view(a, da)
    with pytest.raises(NoDataError):
        tally_votes(candidates, ViewSet(), {}, VotingConfig())
    other, _ = flat_view("other", 2.0)
    with pytest.raises(GeometryError):
        tally_votes(candidates, ViewSet([other]), {}, VotingConfig())


def test_voting_config_validation():
    with pytest.raises(GeometryError):
        VotingConfig(depth_tolerance=0.0)
    with pytest.raises(GeometryError):
        VotingConfig(confidence_mode="median")


positions = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                   elements=st.floats(-1.0, 1.0, allow_nan=False))


@given(positions, st.integers(0, 2**16))
def test_merge_keeps_best_point_per_bin(points, seed):
    rng = np.random.default_rng(seed)
    n = len(points)
    split = n // 2
    cloud = ConfidencePointCloud(
        points, rng.random((n, 3)), rng.random(n).round(1), rng.integers(1, 4, n), np.full(n, "v")
    )
    prev, new = cloud.select(np.arange(split)), cloud.select(np.arange(split, n))
    bin_size = 0.25

    merged = merge_point_clouds(prev, new, bin_size)

    keys = np.floor(merged.positions / bin_size).astype(np.int64)
    assert len(np.unique(keys, axis=0)) == len(merged)
    all_keys = np.floor(cloud.positions / bin_size).astype(np.int64)
    assert len(np.unique(all_keys, axis=0)) == len(merged)
    for key, conf in zip(keys, merged.confidence):
        in_bin = np.all(all_keys == key, axis=1)
        assert conf == cloud.confidence[in_bin].max()


def test_merge_tie_prefers_support_then_previous():
    p = np.array([[0.01, 0.01, 0.01]])
    prev = ConfidencePointCloud(p, [[1.0, 0.0, 0.0]], [0.5], [2], ["prev"])
    new = ConfidencePointCloud(p + 0.001, [[0.0, 0.0, 1.0]], [0.5], [2], ["new"])
    stronger = ConfidencePointCloud(p + 0.002, [[0.0, 1.0, 0.0]], [0.5], [3], ["strong"])

    assert merge_point_clouds(prev, new, 0.05).source_view.tolist() == ["prev"]
    assert merge_point_clouds(prev, stronger, 0.05).source_view.tolist() == ["strong"]


def test_merge_rejects_bad_bin_size():
    with pytest.raises(GeometryError):
        merge_point_clouds(ConfidencePointCloud(), ConfidencePointCloud(), 0.0)


def test_cloud_validation_and_centroid():
    with pytest.raises(GeometryError):
        ConfidencePointCloud([[0.0, 0.0, 0.0]], [[0, 0, 0]], [1.5], [1], ["a"])
    with pytest.raises(GeometryError):
        ConfidencePointCloud([[0.0, 0.0, 0.0]], [[0, 0, 0]], [0.5], [0], ["a"])
    with pytest.raises(NoDataError):
        ConfidencePointCloud().weighted_centroid()

    cloud = ConfidencePointCloud([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], np.zeros((2, 3)), [1.0, 0.0], [1, 1], ["a", "a"])
    np.testing.assert_allclose(cloud.weighted_centroid(), [0.0, 0.0, 0.0])


class FixedDepth(DepthEstimator):
    def __init__(self, values, K=None):
        self.values = values
        self.K = K
        self.calls = []

    def estimate(self, image, view_id=None, camera_hint=None):
        self.calls.append(view_id)
        return DepthEstimate(depth=DepthMap.from_array(self.values), intrinsics=self.K)


def test_initial_prior_of_a_frontal_plane():
    values = np.full((SIZE, SIZE), 2.0)
    values[:4, :4] = np.nan
    K = CameraIntrinsics.from_fov(SIZE, SIZE, 60.0)
    backend = FixedDepth(values, K)

    cloud, K_out, E = initial_prior(np.full((SIZE, SIZE, 3), 0.5), backend)

    assert backend.calls == ["seed"]
    assert K_out is K
    assert E.allclose(CameraPose.identity())
    assert len(cloud) == SIZE * SIZE - 16
    np.testing.assert_allclose(cloud.positions[:, 2], 2.0)
    np.testing.assert_allclose(cloud.confidence, 1.0)
    assert np.all(cloud.support == 1)
    assert set(cloud.source_view) == {"seed"}


def test_initial_prior_rejects_a_depth_of_another_size():
    backend = FixedDepth(np.full((SIZE, SIZE + 1), 2.0))

    with pytest.raises(ContractError) as info:
        initial_prior(np.full((SIZE, SIZE, 3), 0.5), backend)

    assert info.value.field == "depth.shape"


def test_prior_from_estimate_falls_back_to_default_camera():
    image = np.full((12, 20, 3), 0.5)
    estimate = DepthEstimate(depth=DepthMap.from_array(np.full((12, 20), 1.5)))

    cloud, K, E = prior_from_estimate(image, estimate, fallback_hfov_deg=90.0)

    assert K.width == 20 and K.height == 12
    assert K.fx == pytest.approx(10.0)
    assert E.allclose(CameraPose.identity())
    assert len(cloud) == 240


def test_ply_file_keeps_counts_and_attributes(tmp_path):
    a, da = flat_view("a", 2.0)
    cloud = candidates_from_view(a, da)
    path = tmp_path / "prior.ply"

    write_ply(path, cloud)
    back = read_ply(path)

    assert path.read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")
    assert len(back) == len(cloud)
    np.testing.assert_allclose(back.positions, cloud.positions, atol=1e-6)
    np.testing.assert_array_equal(back.support, cloud.support)
