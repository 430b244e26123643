"""
Tests for the T4 tensor container.
"""

import numpy as np
import pytest

from src.errors import BadMagicError, ShapeError, TruncatedPayloadError, UnknownDtypeError
from src.t4_format import decode_t4, encode_t4, header_size, read_t4, read_t4_header, write_t4
from src.tensor import Tensor


class TestEncode:
    def test_rank2_u8_header(self):
        raw = encode_t4(np.arange(6, dtype=np.uint8).reshape(2, 3))
        assert header_size(2) == 21
        assert raw[:3] == b"T4\n"
        assert raw[3] == 2 and raw[4] == 2
        assert raw[5:13] == (2).to_bytes(8, "little")
        assert raw[13:21] == (3).to_bytes(8, "little")
        assert raw[21:] == bytes(range(6))

    def test_f32_is_little_endian(self):
        raw = encode_t4(np.array([1.0], dtype=">f4"))
        assert raw[3] == 0
        assert raw[-4:] == np.array([1.0], dtype="<f4").tobytes()

    def test_tensor_input(self):
        t = Tensor(np.ones((2, 2)), dtype=np.float32)
        np.testing.assert_array_equal(decode_t4(encode_t4(t)), t.data)

    def test_unsupported_dtype(self):
        with pytest.raises(UnknownDtypeError):
            encode_t4(np.zeros(3, dtype=np.float64))

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            encode_t4(np.zeros((1,) * 5, dtype=np.uint8))


class TestDecode:
    @pytest.mark.parametrize("dtype", ["<f4", "<i4", "u1"])
    def test_file_round_trip(self, tmp_path, rng, dtype):
        values = (rng.standard_normal((2, 3, 4)) * 50).astype(dtype)
        path = tmp_path / "x.t4"
        write_t4(path, values)
        back = read_t4(path)
        assert back.dtype == np.dtype(dtype)
        np.testing.assert_array_equal(back, values)

    def test_scalar_rank_zero(self):
        raw = encode_t4(np.array(7, dtype=np.int32))
        assert len(raw) == header_size(0) + 4
        assert decode_t4(raw).item() == 7

    def test_bad_magic(self):
        raw = bytearray(encode_t4(np.zeros(2, dtype=np.uint8)))
        raw[0:3] = b"T5\n"
        with pytest.raises(BadMagicError):
            decode_t4(bytes(raw))

    def test_truncated_payload(self):
        raw = encode_t4(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(TruncatedPayloadError, match="need 64"):
            decode_t4(raw[:-1])

    def test_truncated_header(self):
        raw = encode_t4(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(TruncatedPayloadError):
            decode_t4(raw[:10])

    def test_trailing_bytes(self):
        with pytest.raises(TruncatedPayloadError):
            decode_t4(encode_t4(np.zeros(2, dtype=np.uint8)) + b"\x00")

    def test_unknown_dtype_code(self):
        raw = bytearray(encode_t4(np.zeros(2, dtype=np.uint8)))
        raw[3] = 9
        with pytest.raises(UnknownDtypeError):
            decode_t4(bytes(raw))

    def test_decoded_array_is_writable(self):
        arr = decode_t4(encode_t4(np.zeros(3, dtype=np.float32)))
        arr[0] = 1.0


class TestReadHeader:
    def test_header_only(self, tmp_path):
        path = tmp_path / "img.t4"
        write_t4(path, np.zeros((3, 8, 16), dtype=np.float32))
        dtype, dims = read_t4_header(path)
        assert dtype == np.dtype("<f4") and dims == (3, 8, 16)

    def test_header_bad_magic(self, tmp_path):
        path = tmp_path / "junk.t4"
        path.write_bytes(b"PNG\x00\x00")
        with pytest.raises(BadMagicError):
            read_t4_header(path)
