import numpy as np
import pytest

from hiretrieval.fileio import FormatError, read_embeddings, read_head, read_ppm, write_embeddings, write_head, write_ppm


def test_embedding_round_trip_and_layout(tmp_path):
    m = np.arange(6, dtype=float).reshape(2, 3) / 4
    write_embeddings(tmp_path / "e.emb", m)
    raw = (tmp_path / "e.emb").read_bytes()
    assert raw[:4] == b"EMB1" and len(raw) == 12 + 24
    assert np.array_equal(read_embeddings(tmp_path / "e.emb"), m)


def test_head_magic_checked(tmp_path):
    write_head(tmp_path / "h.bin", np.eye(2))
    assert np.array_equal(read_head(tmp_path / "h.bin"), np.eye(2))
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "h.bin")


def test_truncated_file(tmp_path):
    write_embeddings(tmp_path / "e.emb", np.ones((3, 3)))
    data = (tmp_path / "e.emb").read_bytes()
    (tmp_path / "e.emb").write_bytes(data[:-4])
    with pytest.raises(FormatError):
        read_embeddings(tmp_path / "e.emb")


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "x.ppm"), img)
