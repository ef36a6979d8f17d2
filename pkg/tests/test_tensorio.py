import struct

import numpy as np
import pytest

from consistyle import tensorio
from consistyle.errors import ArtifactError


def test_roundtrip_and_layout(tmp_path):
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    buf = tensorio.encode(a)
    assert buf[:4] == b"CSTY"
    assert struct.unpack_from("<II3Q", buf, 4) == (1, 3, 2, 3, 4)
    assert len(buf) == 4 + 8 + 24 + 4 * 24
    assert struct.unpack_from("<f", buf, 36)[0] == 0.0
    np.testing.assert_array_equal(tensorio.decode(buf), a)
    tensorio.save(tmp_path / "x.csty", a)
    np.testing.assert_array_equal(tensorio.load(tmp_path / "x.csty"), a)
    assert tensorio.checksum(tmp_path / "x.csty") == tensorio.checksum(tmp_path / "x.csty")


def test_scalar_and_empty():
    assert tensorio.decode(tensorio.encode(np.float32(3.5))) == 3.5
    assert tensorio.decode(tensorio.encode(np.zeros((0, 3)))).shape == (0, 3)


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XSTY" + b[4:], 0),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], 4),
    (lambda b: b[:8] + struct.pack("<I", 99) + b[12:], 8),
    (lambda b: b[:-4], 28 + 4 * 5),
    (lambda b: b[:16], 16),
])
def test_corruption_reports_offset(mutate, offset):
    buf = tensorio.encode(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(ArtifactError) as info:
        tensorio.decode(mutate(buf), "t.csty")
    assert info.value.offset == offset
    assert f"byte {offset}" in str(info.value)


def test_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        tensorio.load(tmp_path / "nope.csty")
