import numpy as np
import pytest

from evoscene.errors import NoDataError
from evoscene.meshing import TexturedMesh
from evoscene.metrics import MetricRecord, chamfer, coverage_fraction, sample_mesh

SQUARE = TexturedMesh([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], [[0, 1, 2], [0, 2, 3]])


def grid_points(step=0.25):
    ticks = np.arange(0.0, 1.0 + 1e-9, step)
    xs, ys = np.meshgrid(ticks, ticks)
    return np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=1)


def test_coverage_counts_reference_samples_within_tolerance():
    reference = grid_points()
    half = reference[reference[:, 0] < 0.5]

    assert coverage_fraction(reference, reference, 0.01) == 1.0
    assert coverage_fraction(half, reference, 0.01) == pytest.approx(10 / 25)
    assert coverage_fraction(half, reference, 0.8) == 1.0
    assert coverage_fraction(np.zeros((0, 3)), reference, 1.0) == 0.0

    with pytest.raises(NoDataError):
        coverage_fraction(reference, np.zeros((0, 3)), 1.0)


def test_chamfer_is_symmetric_mean_distance():
    a = grid_points()
    b = a + [0.0, 0.0, 0.1]

    assert chamfer(a, a) == 0.0
    assert chamfer(a, b) == pytest.approx(0.1)
    assert chamfer(a, b) == pytest.approx(chamfer(b, a))

    with pytest.raises(NoDataError):
        chamfer(a, np.zeros((0, 3)))


def test_mesh_samples_stay_on_the_triangles():
    points = sample_mesh(SQUARE, 400, seed=3)

    assert points.shape == (400, 3)
    np.testing.assert_allclose(points[:, 2], 0.0)
    assert np.all((points[:, :2] >= 0) & (points[:, :2] <= 1))
    np.testing.assert_array_equal(points, sample_mesh(SQUARE, 400, seed=3))
    assert sample_mesh(TexturedMesh.empty(), 10).shape == (0, 3)


def test_metric_record_has_no_wall_clock_fields():
    record = MetricRecord(t=1, stage="B", losses=[2.0, 1.0], coverage=0.5)

    dumped = record.model_dump()

    assert dumped["counts"] == {} and dumped["extra"] == {}
    assert set(dumped) == {"t", "stage", "counts", "losses", "filter", "coverage", "extra"}
