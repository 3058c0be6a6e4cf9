import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pivotalign.bank import (
    BankFormatError,
    EmbeddingBank,
    LabeledBank,
    l2_normalize_bank,
    read_bank,
    read_labeled_bank,
    read_labels,
    write_bank,
    write_labeled_bank,
)


def make_bank(data, space="clip", **meta):
    return EmbeddingBank(data=np.asarray(data, dtype=np.float32),
                         meta={"space": space, **meta})


class TestInvariants:
    def test_minimum_shape(self):
        with pytest.raises(ValueError):
            make_bank(np.zeros((0, 4)))
        with pytest.raises(ValueError, match="dim"):
            make_bank([[1.0]])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            make_bank([[1.0, np.nan]])

    def test_space_required(self):
        with pytest.raises(ValueError, match="space"):
            EmbeddingBank(data=np.ones((1, 2), dtype=np.float32), meta={})

    def test_data_is_read_only(self):
        bank = make_bank([[1.0, 2.0]])
        with pytest.raises(ValueError):
            bank.data[0, 0] = 5.0

    def test_labels_must_match_rows(self):
        bank = make_bank([[1.0, 2.0], [3.0, 4.0]])
        with pytest.raises(ValueError, match="labels length"):
            LabeledBank(bank=bank, labels=np.array([0]))

    def test_labels_contiguous_from_zero(self):
        bank = make_bank([[1.0, 2.0], [3.0, 4.0]])
        with pytest.raises(ValueError, match="contiguous"):
            LabeledBank(bank=bank, labels=np.array([0, 2]))
        LabeledBank(bank=bank, labels=np.array([1, 0]))  # fine


class TestFileFormat:
    def test_smallest_bank_byte_count(self, tmp_path):
        path = tmp_path / "tiny.ueb"
        write_bank(make_bank([[1.0, 0.0]]), path)
        # 4+1+1+2+4+8+8 header bytes + one row of two float32s
        assert path.stat().st_size == 28 + 8

    def test_roundtrip_bit_exact(self, tmp_path):
        data = np.array([[1.5, -2.25, 3e-8], [0.0, -0.0, 6.5e4]], dtype=np.float32)
        path = tmp_path / "b.ueb"
        write_bank(make_bank(data, language="en"), path)
        back = read_bank(path)
        assert back.data.tobytes() == data.tobytes()
        assert back.meta["space"] == "clip"
        assert back.meta["language"] == "en"

    def test_missing_sidecar_means_unknown_space(self, tmp_path):
        path = tmp_path / "b.ueb"
        write_bank(make_bank([[1.0, 2.0]]), path)
        (tmp_path / "b.ueb.meta.json").unlink()
        assert read_bank(path).meta == {"space": "unknown"}

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.ueb"
        path.write_bytes(b"")
        with pytest.raises(BankFormatError, match="not a UEB1 file"):
            read_bank(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ueb"
        path.write_bytes(b"NOPE" + b"\x00" * 40)
        with pytest.raises(BankFormatError, match="not a UEB1 file"):
            read_bank(path)

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "v2.ueb"
        header = struct.pack("<4sBBHIQQ", b"UEB1", 2, 0, 0, 2, 1, 0)
        path.write_bytes(header + b"\x00" * 8)
        with pytest.raises(BankFormatError, match="unsupported version"):
            read_bank(path)

    def test_truncated_payload(self, tmp_path):
        # header says 10 rows, payload holds 9
        path = tmp_path / "short.ueb"
        header = struct.pack("<4sBBHIQQ", b"UEB1", 1, 0, 0, 2, 10, 0)
        path.write_bytes(header + b"\x00" * (9 * 2 * 4))
        with pytest.raises(BankFormatError, match="corrupt bank"):
            read_bank(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(BankFormatError, match="gone.ueb"):
            read_bank(tmp_path / "gone.ueb")

    @settings(deadline=None, max_examples=60)
    @given(
        rows=st.integers(1, 8),
        dim=st.integers(2, 16),
        seed=st.integers(0, 2**31),
    )
    def test_roundtrip_property(self, tmp_path_factory, rows, dim, seed):
        # Random finite float32 payloads, including tiny/huge magnitudes.
        rs = np.random.RandomState(seed % 2**31)
        bits = rs.randint(0, 2**32, size=(rows, dim), dtype=np.uint32)
        data = bits.view(np.float32)
        data = np.where(np.isfinite(data), data, np.float32(1.0))
        path = tmp_path_factory.mktemp("fuzz") / "r.ueb"
        write_bank(make_bank(data), path)
        assert read_bank(path).data.tobytes() == np.ascontiguousarray(data).tobytes()


class TestLabels:
    def test_roundtrip(self, tmp_path):
        bank = make_bank([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        lb = LabeledBank(bank=bank, labels=np.array([0, 1, 0]))
        path = tmp_path / "lb.ueb"
        write_labeled_bank(lb, path)
        back = read_labeled_bank(path)
        assert np.array_equal(back.labels, [0, 1, 0])
        assert back.n_classes == 2

    def test_labels_file_is_decimal_lines(self, tmp_path):
        path = tmp_path / "x.labels"
        path.write_text("0\n1\n2\n")
        assert np.array_equal(read_labels(path), [0, 1, 2])

    def test_corrupt_labels(self, tmp_path):
        path = tmp_path / "x.labels"
        path.write_text("0\nfive\n")
        with pytest.raises(BankFormatError, match="corrupt labels"):
            read_labels(path)


class TestNormalize:
    def test_three_four_five(self):
        out = l2_normalize_bank(make_bank([[3.0, 4.0]]))
        assert np.allclose(out.data, [[0.6, 0.8]], atol=1e-7)

    def test_idempotent(self):
        bank = make_bank(np.random.RandomState(0).normal(size=(5, 7)))
        once = l2_normalize_bank(bank)
        twice = l2_normalize_bank(once)
        assert np.allclose(once.data, twice.data, atol=1e-6)
        norms = np.linalg.norm(once.data.astype(np.float64), axis=1)
        assert np.allclose(norms, 1.0, atol=1e-6)

    def test_zero_row_named(self):
        with pytest.raises(ValueError, match="zero-norm row 0"):
            l2_normalize_bank(make_bank([[0.0, 0.0], [1.0, 1.0]]))

    def test_preserves_meta(self):
        out = l2_normalize_bank(make_bank([[1.0, 1.0]], language="cs"))
        assert out.meta["language"] == "cs"


def test_sidecar_is_flat_string_map(tmp_path):
    path = tmp_path / "m.ueb"
    write_bank(make_bank([[1.0, 2.0]], modality="image", encoder_id="synthetic"), path)
    sidecar = json.loads((tmp_path / "m.ueb.meta.json").read_text())
    assert all(isinstance(v, str) for v in sidecar.values())
    assert sidecar["modality"] == "image"
