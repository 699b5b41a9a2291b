import numpy as np
import pytest

from reuselab.checkpoint import load_weights
from reuselab.model import NULL_TOKEN_ROW, PromptSpec, all_prompts, init_weights
from reuselab.numerics import SeededRng
from reuselab.train import (
    TrainConfig,
    denoising_loss,
    forward_batch,
    generate_dataset,
    gradient_check,
    train_toy,
)

TINY = TrainConfig(steps=40, batch_size=16, dataset_size=64, val_size=32)


class TestDataset:
    def test_nine_items_cover_every_class(self):
        data = generate_dataset(9, seed=0)
        classes = {prompt.class_index for _, prompt in data}
        assert classes == set(range(9))

    def test_pixels_in_unit_interval(self):
        for img, _ in generate_dataset(18, seed=1):
            assert img.shape == (3, 16, 16)
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_red_circle_lights_red_channel(self):
        data = generate_dataset(9, seed=0)
        img = next(i for i, p in data if p.shape == "circle" and p.color == "red")
        red_bright = int((img[0] > 0.5).sum())
        other_bright = int((img[1] > 0.5).sum() + (img[2] > 0.5).sum())
        assert red_bright >= 4
        assert other_bright == 0

    def test_deterministic(self):
        a = generate_dataset(12, seed=5)
        b = generate_dataset(12, seed=5)
        for (ia, pa), (ib, pb) in zip(a, b):
            assert pa == pb and np.array_equal(ia, ib)


class TestForwardBatch:
    def test_matches_single_image_path(self, tiny_weights):
        from reuselab.model import predict_noise

        x = SeededRng(21).gaussian((2, 3, 16, 16))
        prompt = PromptSpec("square", "green")
        rows = np.stack([prompt.token_rows()] * 2).astype(np.int64)
        t_idx = np.array([500, 500])
        eps_batch, _ = forward_batch(tiny_weights, x, t_idx, rows)
        for b in range(2):
            eps_single, _ = predict_noise(tiny_weights, x[b], 500, prompt)
            assert np.max(np.abs(eps_batch[b] - eps_single)) < 1e-5


class TestTraining:
    def test_zero_steps_returns_init(self):
        result = train_toy(TrainConfig(steps=0, dataset_size=16, val_size=8), seed=0)
        expected = init_weights(SeededRng(0).derive(1))
        for name, tensor in expected.tensors.items():
            assert np.array_equal(result.weights.tensors[name], tensor)

    def test_small_run_reduces_loss(self):
        result = train_toy(TINY, seed=0)
        assert result.val_loss_final < result.val_loss_initial
        assert np.mean(result.losses[-5:]) < np.mean(result.losses[:5])

    def test_same_seed_identical_checkpoints(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        train_toy(TINY, seed=3, checkpoint_path=p1)
        train_toy(TINY, seed=3, checkpoint_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        train_toy(TINY, seed=1, checkpoint_path=p1)
        train_toy(TINY, seed=2, checkpoint_path=p2)
        w1, w2 = load_weights(p1), load_weights(p2)
        assert any(not np.array_equal(w1.tensors[k], w2.tensors[k])
                   for k in w1.tensors)


def test_default_run_halves_validation_loss(trained_weights):
    """Regression gate on the cached default checkpoint."""
    val = generate_dataset(256, seed=1_000_003)
    initial = denoising_loss(init_weights(SeededRng(0).derive(1)), val, 0)
    final = denoising_loss(trained_weights, val, 0)
    assert final < 0.5 * initial


def test_gradient_check_small_batch(tiny_weights):
    data = generate_dataset(4, seed=0)
    x = np.stack([d[0] for d in data]) * 2.0 - 1.0
    rows = np.stack([d[1].token_rows() for d in data]).astype(np.int64)
    rows[0] = (NULL_TOKEN_ROW, NULL_TOKEN_ROW)
    t_idx = np.array([100, 400, 700, 1000])
    target = SeededRng(33).gaussian((4, 3, 16, 16))
    max_rel = gradient_check(tiny_weights, x.astype(np.float32), t_idx, rows, target)
    assert set(max_rel) == set(tiny_weights.tensors)
    for name, rel in max_rel.items():
        assert rel <= 1e-2, f"{name}: {rel}"
