import numpy as np
import pytest

import maskgen


def test_iou_and_ahd_hand_values():
    a = np.zeros((4, 4), dtype=bool)
    a[:2, :] = True
    b = np.zeros((4, 4), dtype=bool)
    b[:, :] = True
    assert maskgen.iou(a, b) == 0.5
    assert maskgen.ahd([[0, 0]], [[3, 4]]) == 5.0
    assert maskgen.ahd([[0, 0], [2, 0]], [[0, 0]]) == 0.5
    assert maskgen.mask_ahd(a, a) == 0.0
    assert maskgen.mask_ahd(a, np.zeros((4, 4), dtype=bool)) is None


def test_c_iou_two_pairs():
    def row(n, k):
        m = np.zeros((1, n), dtype=bool)
        m[0, :k] = True
        return m

    assert maskgen.c_iou([(row(4, 2), row(4, 4)), (row(6, 3), row(6, 6))]) == 0.5


def test_generated_samples_are_deterministic():
    s = maskgen.generate_sample(7)
    t = maskgen.generate_sample(7)
    assert s["image"].shape == (64, 64, 3)
    assert s["mask"].shape == (64, 64)
    assert s["mask"].any()
    assert s["phrase"] in s["instruction"]
    assert np.array_equal(s["image"], t["image"])
    assert np.array_equal(s["mask"], t["mask"])
    with pytest.raises(ValueError):
        maskgen.generate_sample(1, task="panoptic")


def test_codebook_round_trip(tmp_path):
    path = tmp_path / "book.txt"
    rows = ["-1 " * 255 + "-1", "1 " * 255 + "1"]
    path.write_text("MASKCB v1 2 256 0\n" + "\n".join(rows) + "\n")
    book = maskgen.Codebook.load(path)
    assert (book.size, book.dim) == (2, 256)
    mask = np.zeros((64, 64), dtype=bool)
    mask[:32, 16:48] = True
    tokens = book.encode(mask)
    assert tokens.shape == (4, 4)
    assert np.array_equal(book.decode(tokens), mask)


def test_missing_checkpoint_is_a_validation_error(tmp_path):
    with pytest.raises(ValueError):
        maskgen.Segmenter(tmp_path / "missing.ckpt")
