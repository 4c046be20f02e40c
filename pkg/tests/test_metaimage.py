import numpy as np
import pytest

from brokengeo import metaimage
from brokengeo.field_core import ScalarImage, VectorField
from brokengeo.metaimage import MetaImageError


@pytest.mark.parametrize("suffix", [".mhd", ".mha"])
def test_scalar_roundtrip(tmp_path, suffix):
    img = ScalarImage(np.arange(24.0).reshape(4, 6) / 7.0, spacing=(0.5, 2.0))
    written = metaimage.write(tmp_path / f"a{suffix}", img)
    assert all(p.exists() for p in written)
    back = metaimage.read(tmp_path / f"a{suffix}")
    assert isinstance(back, ScalarImage)
    assert back.spacing == (0.5, 2.0)
    np.testing.assert_array_equal(back.data, img.data.astype(np.float32))


def test_vector_roundtrip_3d(tmp_path):
    rng = np.random.default_rng(0)
    v = VectorField(rng.standard_normal((3, 4, 5, 3)).astype(np.float32))
    metaimage.write(tmp_path / "v.mhd", v)
    back = metaimage.read(tmp_path / "v.mhd")
    assert isinstance(back, VectorField)
    np.testing.assert_array_equal(back.data, v.data)


def test_layout_is_x_fastest_little_endian(tmp_path):
    # array axis 0 is x; DimSize lists x first and x varies fastest on disk
    data = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    metaimage.write(tmp_path / "a.mhd", ScalarImage(data))
    header = (tmp_path / "a.mhd").read_text()
    assert "DimSize = 2 3" in header
    assert "ElementType = MET_FLOAT" in header
    raw = np.frombuffer((tmp_path / "a.raw").read_bytes(), dtype="<f4")
    np.testing.assert_array_equal(raw, [1, 4, 2, 5, 3, 6])


def test_rejects_other_element_types(tmp_path):
    (tmp_path / "b.mhd").write_text(
        "NDims = 2\nDimSize = 2 2\nElementType = MET_SHORT\nElementDataFile = b.raw\n"
    )
    (tmp_path / "b.raw").write_bytes(b"\0" * 8)
    with pytest.raises(MetaImageError):
        metaimage.read(tmp_path / "b.mhd")


def test_rejects_truncated_payload(tmp_path):
    metaimage.write(tmp_path / "a.mhd", ScalarImage(np.ones((4, 4))))
    (tmp_path / "a.raw").write_bytes(b"\0" * 10)
    with pytest.raises(MetaImageError):
        metaimage.read(tmp_path / "a.mhd")


def test_rejects_missing_header_fields(tmp_path):
    (tmp_path / "c.mhd").write_text("NDims = 2\nElementDataFile = c.raw\n")
    with pytest.raises(MetaImageError):
        metaimage.read(tmp_path / "c.mhd")
