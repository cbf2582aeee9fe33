import numpy as np
import pytest

from flow4d.phantom import LV, LVM, RV, LabelGrid, PhantomError, generate_subject, render_frame, render_sequence
from flow4d.render import PALETTE, plane_image, read_ppm, render


def colours(img):
    return {tuple(c) for c in img.reshape(-1, 3)}


def test_empty_grid_renders_solid_background(tmp_path):
    (path,) = render(LabelGrid(np.zeros((6, 7, 8), np.uint8)), tmp_path)
    img = read_ppm(path)
    assert img.shape == (7, 6, 3)
    assert colours(img) == {tuple(PALETTE[0])}


def test_rerender_is_byte_identical(tmp_path):
    seq = render_sequence(generate_subject(2), 4)
    a = render(seq, tmp_path / "a")
    b = render(seq, tmp_path / "b")
    assert len(a) == 4
    assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]


def test_mid_short_axis_slice_shows_ventricles():
    grid = render_frame(generate_subject(0), 1, 20)
    img = plane_image(grid, "z", 14)
    present = colours(img)
    for cls in (LV, LVM, RV):
        assert tuple(PALETTE[cls]) in present
    assert len(present) >= 3


def test_plane_outside_grid():
    grid = LabelGrid(np.zeros((4, 4, 4), np.uint8))
    with pytest.raises(PhantomError):
        plane_image(grid, "z", 4)
    with pytest.raises(PhantomError):
        plane_image(grid, "w", 0)


def test_pixels_map_through_palette():
    labels = np.zeros((3, 2, 1), np.uint8)
    labels[2, 1, 0] = 5
    img = plane_image(LabelGrid(labels), "z", 0)
    # rows run top-down over decreasing y, columns over x
    assert np.array_equal(img[0, 2], PALETTE[5])
    assert np.array_equal(img[1, 2], PALETTE[0])
