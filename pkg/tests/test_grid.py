import numpy as np
import pytest

from flowcast.exceptions import (
    BorderTooLarge,
    DegenerateFrame,
    DimensionMismatch,
    ValidationError,
)
from flowcast.grid import (
    Field,
    FrameWindow,
    GridSpec,
    StandardizationRecord,
    interior_mask,
    pairwise_center_offsets,
    standardize,
    unstandardize,
)


class TestGridSpec:
    def test_basic_geometry(self):
        g = GridSpec(n=8)
        assert g.size == 64
        assert g.cell_area == pytest.approx(1.0 / 64)
        assert g.cell_width == pytest.approx(1.0 / 8)

    def test_rejects_tiny_grid(self):
        with pytest.raises(ValidationError):
            GridSpec(n=3)

    def test_cell_centers_first_and_last(self):
        g = GridSpec(n=4)
        centers = g.cell_centers
        # pixel 0 is row 0, col 0: center (x, y) = (0.125, 0.125)
        assert centers[0] == pytest.approx([0.125, 0.125])
        # last pixel is row 3, col 3
        assert centers[-1] == pytest.approx([0.875, 0.875])
        # pixel 1 is row 0, col 1: x advances with the column
        assert centers[1] == pytest.approx([0.375, 0.125])

    def test_index_rowcol_round_trip(self):
        g = GridSpec(n=5)
        for idx in range(g.size):
            row, col = g.rowcol_of(idx)
            assert g.index_of(row, col) == idx

    def test_centers_are_read_only(self):
        g = GridSpec(n=4)
        with pytest.raises(ValueError):
            g.cell_centers[0, 0] = 99.0

    def test_pairwise_offsets_antisymmetric(self):
        off = pairwise_center_offsets(4)
        assert off.shape == (16, 16, 2)
        assert np.allclose(off, -np.transpose(off, (1, 0, 2)))


class TestField:
    def test_field_copies_and_freezes(self):
        g = GridSpec(n=4)
        values = np.arange(16.0)
        f = Field(g, values)
        values[0] = 99.0
        assert f.values[0] == 0.0
        with pytest.raises(ValueError):
            f.values[0] = 5.0

    def test_as_image_row_major(self):
        g = GridSpec(n=4)
        f = Field(g, np.arange(16.0))
        img = f.as_image()
        assert img.shape == (4, 4)
        assert img[1, 2] == 6.0  # index = row * n + col

    def test_shape_mismatch(self):
        g = GridSpec(n=4)
        with pytest.raises(DimensionMismatch):
            Field(g, np.zeros(15))


class TestFrameWindow:
    def test_window_orders_frames(self):
        g = GridSpec(n=4)
        frames = tuple(Field(g, np.full(16, float(i))) for i in range(3))
        w = FrameWindow(frames=frames)
        assert w.tau == 3
        assert w.newest.values[0] == 2.0
        stacked = w.stack()
        assert stacked.shape == (3, 16)
        assert np.all(stacked[0] == 0.0) and np.all(stacked[2] == 2.0)

    def test_needs_at_least_two_frames(self):
        g = GridSpec(n=4)
        with pytest.raises(ValidationError):
            FrameWindow(frames=(Field(g, np.zeros(16)),))

    def test_rejects_mixed_grids(self):
        frames = (
            Field(GridSpec(n=4), np.zeros(16)),
            Field(GridSpec(n=5), np.zeros(25)),
        )
        with pytest.raises(DimensionMismatch):
            FrameWindow(frames=frames)


class TestStandardization:
    def test_round_trip_identity(self):
        g = GridSpec(n=4)
        rng = np.random.default_rng(0)
        f = Field(g, rng.normal(3.0, 2.5, 16))
        std, rec = standardize(f)
        back = unstandardize(std, rec)
        assert np.allclose(back.values, f.values, atol=1e-12)

    def test_standardized_moments(self):
        g = GridSpec(n=8)
        rng = np.random.default_rng(1)
        f = Field(g, rng.normal(-7.0, 0.4, 64))
        std, rec = standardize(f)
        assert std.values.mean() == pytest.approx(0.0, abs=1e-12)
        # population convention: divide by sqrt(mean of squared deviations)
        assert std.values.std() == pytest.approx(1.0, abs=1e-12)
        assert rec.mean == pytest.approx(f.values.mean())
        assert rec.sd == pytest.approx(f.values.std())

    def test_constant_frame_rejected(self):
        g = GridSpec(n=4)
        with pytest.raises(DegenerateFrame):
            standardize(Field(g, np.full(16, 2.0)))

    def test_record_requires_positive_sd(self):
        with pytest.raises(ValidationError):
            StandardizationRecord(mean=0.0, sd=0.0)


class TestInteriorMask:
    def test_border_two_on_eight(self):
        g = GridSpec(n=8)
        mask = interior_mask(g, 2)
        img = mask.reshape(8, 8)
        assert mask.sum() == 16  # central 4x4 block
        assert img[2:6, 2:6].all()
        assert not img[0].any() and not img[:, 0].any()
        assert not img[1].any() and not img[:, -2].any()

    def test_border_zero_is_everything(self):
        g = GridSpec(n=4)
        assert interior_mask(g, 0).all()

    def test_border_too_large(self):
        g = GridSpec(n=8)
        with pytest.raises(BorderTooLarge):
            interior_mask(g, 4)
