import numpy as np
import pytest

from drrquant.drr import project_drr
from drrquant.errors import GeometryError, InvariantError, UsageError
from drrquant.grids import BinaryMask3D, ProjectionImage, Volume
from drrquant.maskproj import (
    CutoffConfig,
    PUBLISHED_INTENSITY_CUTOFF,
    binarize_map,
    calibrate_cutoff,
    cutoff_grid,
    intensity_projection,
    parse_grid,
    project_mask,
    thickness_projection,
)
from drrquant.phantom import PhantomSpec, box, generate_phantom
from conftest import box_phantom_spec


def mask3d(shape, spacing=(1, 1, 1)):
    return np.zeros(shape, bool), spacing


def test_full_depth_box_thickness():
    _, lung, _, _ = generate_phantom(box_phantom_spec(margin=0.0))
    t = thickness_projection(lung)
    assert t.kind == "thickness-mm" and np.all(t.data == 100.0)


def test_empty_mask_zero_map():
    m = BinaryMask3D(np.zeros((3, 4, 5), bool), (1, 1, 1))
    assert np.all(thickness_projection(m).data == 0)
    v = Volume(np.zeros((3, 4, 5), np.int16), (1, 1, 1))
    assert np.all(intensity_projection(v, m).data == 0)


def test_disjoint_slabs():
    d = np.zeros((2, 60, 3), bool)
    d[1, 2:22, 1] = True
    d[1, 30:45, 1] = True
    t = thickness_projection(BinaryMask3D(d, (1, 0.5, 1)))
    # brute-force column count
    expected = np.array([[sum(d[k, :, i]) * 0.5 for i in range(3)] for k in range(2)])
    assert np.array_equal(t.data, expected) and t.data[1, 1] == 17.5


def test_thickness_multiples_of_sy(rng):
    d = rng.random((6, 9, 7)) > 0.4
    t = thickness_projection(BinaryMask3D(d, (1, 0.75, 1)))
    assert np.all(np.mod(t.data / 0.75, 1) == 0) and t.data.max() <= 9 * 0.75


def test_intensity_column():
    hu = np.full((1, 50, 1), -600, np.int16)
    m = np.zeros_like(hu, bool)
    m[0, 5:45, 0] = True
    img = intensity_projection(Volume(hu, (1, 1, 1)), BinaryMask3D(m, (1, 1, 1)))
    assert img.kind == "intensity-integral"
    assert img.data[0, 0] == pytest.approx(16.96, abs=1e-12)


def test_intensity_full_mask_equals_drr(rng):
    hu = rng.integers(-1200, 1500, size=(5, 8, 6)).astype(np.int16)
    v = Volume(hu, (1, 0.6, 1))
    full = BinaryMask3D(np.ones(hu.shape, bool), v.spacing)
    assert np.array_equal(intensity_projection(v, full).data, project_drr(v).data)


def test_intensity_geometry_mismatch():
    v = Volume(np.zeros((2, 2, 2), np.int16), (1, 1, 1))
    with pytest.raises(GeometryError):
        intensity_projection(v, BinaryMask3D(np.ones((2, 2, 2), bool), (1, 2, 1)))


def test_intensity_needs_volume():
    with pytest.raises(UsageError):
        project_mask(BinaryMask3D(np.ones((2, 2, 2), bool), (1, 1, 1)), "intensity")


def test_binarize_boundaries():
    img = ProjectionImage(np.array([[38.0, 37.9, 0.0]]), (1, 1), "thickness-mm")
    assert binarize_map(img, CutoffConfig("thickness", 38.0)).data.tolist() == [[True, False, False]]
    assert binarize_map(img, CutoffConfig("thickness", 38.0, inclusive=False)).data.tolist() == [[False] * 3]
    assert binarize_map(img, CutoffConfig("thickness", 0.0)).data.all()


def test_binarize_kind_mismatch():
    img = ProjectionImage(np.ones((2, 2)), (1, 1), "thickness-mm")
    with pytest.raises(UsageError):
        binarize_map(img, CutoffConfig("intensity", 1.0))


def test_cutoff_config():
    assert CutoffConfig.published_intensity().cutoff == PUBLISHED_INTENSITY_CUTOFF == 25000.0
    assert CutoffConfig().mode == "thickness" and CutoffConfig().cutoff == 38.0
    with pytest.raises(InvariantError):
        CutoffConfig("sideways")
    c = CutoffConfig("intensity", 12.5, False)
    assert CutoffConfig.from_dict(c.to_dict()) == c


def test_grid():
    assert cutoff_grid(10, 90, 10) == [10.0 * k for k in range(1, 10)]
    assert cutoff_grid(0.1, 0.3, 0.1)[-1] == pytest.approx(0.3)
    assert parse_grid("1:5:0.5") == (1.0, 5.0, 0.5)
    for bad in [(5, 1, 1), (1, 5, 0)]:
        with pytest.raises(UsageError):
            cutoff_grid(*bad)
    with pytest.raises(UsageError):
        parse_grid("1:5")


def _dataset(depths, full=False):
    out = []
    for d in depths:
        spec = PhantomSpec((20, 60, 20), (1, 1, 1), lungs=(box((0, 5, 0), (20, 55, 20)),),
                           lesions=(box((0, 5, 0), (10, 55 if full else 5 + d, 10)),))
        out.append(generate_phantom(spec)[:3])
    return out


def test_calibrate_full_depth_picks_smallest():
    res = calibrate_cutoff(_dataset([0, 0, 0], full=True), "thickness", (10, 90, 10))
    assert res.best_cutoff == 10.0 and res.best_mae == 0.0
    # lung is 50 mm deep, so every cutoff up to 50 is exact and 50 < c <= 90 kills the lung
    assert [m for c, m in res.curve if c <= 40] == [0.0] * 4


def test_calibrate_step_curve():
    ds = _dataset([30])
    res = calibrate_cutoff(ds, "thickness", (10, 40, 5))
    # POv = 10*10*30 / (20*50*20) = 15 %; footprint POa = 25 % up to the depth, 0 % beyond
    assert dict(res.curve) == {10.0: 10.0, 15.0: 10.0, 20.0: 10.0, 25.0: 10.0, 30.0: 10.0, 35.0: 15.0, 40.0: 15.0}
    assert res.best_cutoff == 10.0


def test_calibrate_single_value_grid():
    res = calibrate_cutoff(_dataset([30]), "thickness", (33, 33, 1))
    assert res.best_cutoff == 33.0 and len(res.curve) == 1


def test_calibrate_intensity_mode():
    res = calibrate_cutoff(_dataset([20, 30]), "intensity", (0, 20, 0.5))
    assert res.mode == "intensity"
    assert res.best_mae == min(m for _, m in res.curve)
    assert res.best_cutoff == min(c for c, m in res.curve if m == res.best_mae)
    # cutoff 0 turns the whole lung on (POa 100 vs POv 10 and 15)
    assert res.curve[0] == (0.0, 87.5)


def test_calibrate_empty():
    with pytest.raises(UsageError):
        calibrate_cutoff([], "thickness", (1, 2, 1))
