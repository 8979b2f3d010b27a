import time

import numpy as np
import pytest
import torch
from PIL import Image

from style_mixer import (ModelConfig, StyleMixer, TrainConfig, load_encoder,
                         parameter_checksum, random_encoder_weights,
                         save_checkpoint, save_encoder_weights, train)


def make_blob_image(rng, size=128, cells=2):
    """Smooth low-frequency RGB test image (upscaled random cells)."""
    small = (rng.random((cells, cells, 3)) * 255).astype(np.uint8)
    return np.asarray(Image.fromarray(small).resize((size, size), Image.BILINEAR))


@pytest.fixture(scope="session")
def encoder_weights_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "vgg19.npz"
    save_encoder_weights(random_encoder_weights(seed=3), path)
    return path


@pytest.fixture(scope="session")
def encoder(encoder_weights_path):
    return load_encoder(encoder_weights_path)


@pytest.fixture(scope="session")
def quick_model(encoder):
    torch.manual_seed(11)
    return StyleMixer(encoder, ModelConfig())


@pytest.fixture(scope="session")
def quick_checkpoint(quick_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.npz"
    save_checkpoint(quick_model, path)
    return path


@pytest.fixture(scope="session")
def toy_dataset(tmp_path_factory):
    """64 content + 64 style images at 128 px."""
    root = tmp_path_factory.mktemp("toyset")
    rng = np.random.default_rng(7)
    dirs = {}
    for split in ("content", "style"):
        d = root / split
        d.mkdir()
        for i in range(64):
            Image.fromarray(make_blob_image(rng)).save(d / f"{split}_{i:02d}.png")
        dirs[split] = d
    return dirs


@pytest.fixture(scope="session")
def toy_run(encoder_weights_path, toy_dataset, tmp_path_factory):
    """The prescribed toy training run: 200 steps, batch 6, lr 1e-4, 128 px.

    Expensive (tens of minutes on one CPU core); shared by every test
    that needs a trained model.
    """
    out_dir = tmp_path_factory.mktemp("toyrun")
    cfg = TrainConfig(content_dir=str(toy_dataset["content"]),
                      style_dir=str(toy_dataset["style"]),
                      out_dir=str(out_dir),
                      encoder_weights=str(encoder_weights_path),
                      batch_size=6, lr=1e-4, resize_short=128, crop=128,
                      max_steps=200, seed=0, checkpoint_every=100)
    enc = load_encoder(encoder_weights_path)
    checksum_before = parameter_checksum(enc)
    start = time.time()
    final = train(cfg, log=None, encoder=enc)
    elapsed = time.time() - start
    return {"cfg": cfg, "final_checkpoint": final, "out_dir": out_dir,
            "elapsed": elapsed, "encoder": enc,
            "encoder_checksum_before": checksum_before,
            "encoder_checksum_after": parameter_checksum(enc)}
