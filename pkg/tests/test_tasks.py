import gzip
import math
import struct

import numpy as np
import pytest

from dilatedrnn.errors import ConfigurationError, FormatError
from dilatedrnn.model import DilationSchedule, build_model, forward, masked_loss
from dilatedrnn.numeric import Rng
from dilatedrnn.tasks import (
    CopyMemoryConfig,
    PixelSequenceConfig,
    TaskBatch,
    copy_memory_symbols,
    dump_batch,
    fixed_permutation,
    gen_copy_memory,
    load_batch,
    load_mnist_idx,
    make_pixel_sequence,
    pixel_batch,
    write_mnist_idx,
)


class TestCopyMemory:
    def test_layout_t4(self):
        seq = copy_memory_symbols(CopyMemoryConfig(4, batch=3, seed=1))
        assert seq.shape == (3, 24)
        assert ((seq[:, :10] >= 0) & (seq[:, :10] <= 7)).all()
        assert (seq[:, 10:13] == 8).all()
        assert (seq[:, 13:] == 9).all()

    def test_targets_and_mask(self):
        b = gen_copy_memory(CopyMemoryConfig(6, batch=4, seed=2))
        symbols = b.inputs.argmax(axis=2)
        assert b.inputs.shape == (4, 26, 10) and b.inputs.sum(axis=2).min() == 1.0
        assert np.array_equal(b.loss_mask.sum(axis=1), [10] * 4)
        assert b.loss_mask[:, -10:].all()
        assert np.array_equal(b.targets[:, -10:], symbols[:, :10])
        assert not b.targets[~b.loss_mask].any()

    def test_deterministic(self):
        a = gen_copy_memory(CopyMemoryConfig(5, 8, seed=3))
        b = gen_copy_memory(CopyMemoryConfig(5, 8, seed=3))
        c = gen_copy_memory(CopyMemoryConfig(5, 8, seed=4))
        assert np.array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_uniform_guess_loss_is_ln8(self):
        b = gen_copy_memory(CopyMemoryConfig(3, 16))
        logits = np.full(b.targets.shape + (10,), -np.inf)
        logits[..., :8] = 0.0  # uniform over the 8 data symbols
        loss, _ = masked_loss(np.where(np.isinf(logits), -1e9, logits), b.targets, b.loss_mask)
        assert math.isclose(loss, math.log(8), rel_tol=1e-12)

    def test_untrained_zero_readout_gives_ln10(self):
        m = build_model("vanilla", DilationSchedule(2), 10, 4, 10, Rng(0))
        m.readout_weights.value[...] = 0.0
        b = gen_copy_memory(CopyMemoryConfig(5, 4))
        loss, _ = masked_loss(forward(m, b.inputs).logits, b.targets, b.loss_mask)
        assert math.isclose(loss, math.log(10), rel_tol=1e-12)

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            CopyMemoryConfig(0)

    def test_batch_invariants(self):
        with pytest.raises(ValueError):
            TaskBatch(np.zeros((1, 3, 1)), np.zeros((1, 3), int), np.zeros((1, 3), bool), 2)


def idx_bytes(images):
    n, r, c = images.shape
    return struct.pack(">IIII", 0x803, n, r, c) + images.astype(np.uint8).tobytes()


class TestIdx:
    def test_round_trip(self, tmp_path):
        imgs = Rng(0).integers(0, 256, (5, 28, 28))
        labels = np.array([0, 1, 2, 3, 9])
        write_mnist_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
        x, y = load_mnist_idx(tmp_path / "i", tmp_path / "l")
        assert x.shape == (5, 28, 28) and x.min() >= 0 and x.max() <= 1
        assert np.array_equal(np.round(x * 255).astype(int), imgs)
        assert np.array_equal(y, labels)

    def test_gzip(self, tmp_path):
        imgs = np.zeros((2, 28, 28), dtype=np.uint8)
        write_mnist_idx(tmp_path / "i", tmp_path / "l", imgs, [4, 5])
        (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
        x, y = load_mnist_idx(tmp_path / "i.gz", tmp_path / "l")
        assert not x.any() and list(y) == [4, 5]

    def test_truncated(self, tmp_path):
        raw = idx_bytes(np.zeros((3, 28, 28)))
        (tmp_path / "i").write_bytes(raw[:-5])
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
        with pytest.raises(FormatError, match="offset"):
            load_mnist_idx(tmp_path / "i", tmp_path / "l")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x804, 0, 28, 28))
        (tmp_path / "l").write_bytes(struct.pack(">II", 0x801, 0))
        with pytest.raises(FormatError, match="offset 0"):
            load_mnist_idx(tmp_path / "i", tmp_path / "l")

    def test_count_mismatch(self, tmp_path):
        write_mnist_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 28, 28)), [1])
        with pytest.raises(FormatError):
            load_mnist_idx(tmp_path / "i", tmp_path / "l")


class TestPixelSequences:
    image = np.arange(784, dtype=float).reshape(28, 28) / 783.0

    def test_plain(self):
        b = make_pixel_sequence(self.image, PixelSequenceConfig(), Rng(0), label=7)
        assert b.inputs.shape == (1, 784, 1)
        assert np.array_equal(b.inputs[0, :, 0], self.image.reshape(-1))
        assert b.loss_mask.sum() == 1 and b.loss_mask[0, -1] and b.targets[0, -1] == 7
        assert b.num_classes == 10

    def test_noise_padding(self):
        b = make_pixel_sequence(self.image, PixelSequenceConfig(pad_to_T=1000), Rng(0))
        tail = b.inputs[0, 784:, 0]
        assert b.length == 1000 and tail.size == 216
        assert (tail >= 0).all() and (tail <= 1).all() and tail.std() > 0.1
        assert np.array_equal(b.inputs[0, :784, 0], self.image.reshape(-1))

    def test_noise_never_changes_target(self):
        cfg = PixelSequenceConfig(pad_to_T=800)
        a = make_pixel_sequence(self.image, cfg, Rng(1), label=3)
        b = make_pixel_sequence(self.image, cfg, Rng(2), label=3)
        assert not np.array_equal(a.inputs, b.inputs)
        assert np.array_equal(a.targets, b.targets) and np.array_equal(a.loss_mask, b.loss_mask)

    def test_shared_permutation(self):
        perm = fixed_permutation(5)
        assert sorted(perm) == list(range(784))
        imgs = np.stack([self.image, 1 - self.image])
        b = pixel_batch(imgs, [1, 2], PixelSequenceConfig(permutation_seed=5), Rng(0))
        for k in range(2):
            assert np.array_equal(b.inputs[k, :, 0], imgs[k].reshape(-1)[perm])

    def test_short_pad_rejected(self):
        with pytest.raises(ConfigurationError):
            PixelSequenceConfig(pad_to_T=500)

    def test_wrong_image_shape(self):
        with pytest.raises(ConfigurationError):
            make_pixel_sequence(np.zeros((10, 10)), PixelSequenceConfig(), Rng(0))


def test_batch_dump_round_trip(tmp_path):
    b = gen_copy_memory(CopyMemoryConfig(2, 3, seed=9))
    path = dump_batch(b, tmp_path / "b.jsonl", T=2, seed=9)
    loaded, header = load_batch(path)
    assert header["T"] == 2 and header["seed"] == 9 and header["batch"] == 3 and header["num_classes"] == 10
    assert np.array_equal(loaded.inputs, b.inputs)
    assert np.array_equal(loaded.targets, b.targets)
    assert np.array_equal(loaded.loss_mask, b.loss_mask)


def test_batch_dump_rejects_other_files(tmp_path):
    (tmp_path / "x").write_text('{"format": "other"}\n')
    with pytest.raises(FormatError):
        load_batch(tmp_path / "x")
