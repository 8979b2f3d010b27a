"""Dataset ingestion, the optimization loop, and checkpointing.

All data-side randomness (pair sampling, crop offsets) is drawn from one
numpy Generator whose state is serialized into every checkpoint, so a
resumed run consumes exactly the random stream the uninterrupted run
would have.
"""

import csv
import json
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .encoder import default_weights_path, load_encoder, parameter_checksum
from .losses import (LossConfig, contextual_loss, content_loss, identity_loss,
                     style_loss, total_loss)
from .model import (TRAIN_PREFIX, ModelConfig, StyleMixer, load_checkpoint,
                    save_checkpoint)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class TrainConfig:
    content_dir: str = ""
    style_dir: str = ""
    out_dir: str = "runs/default"
    encoder_weights: str = ""
    batch_size: int = 6
    lr: float = 1e-4
    resize_short: int = 512
    crop: int = 256
    max_steps: int = 10000
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop > self.resize_short:
            raise ValueError(
                f"crop ({self.crop}) must not exceed resize_short ({self.resize_short})")


_INT_KEYS = {"batch_size", "resize_short", "crop", "max_steps", "seed",
             "checkpoint_every", "pa.patch_size", "mff.se_ratio",
             "loss.cx_max_positions"}
_FLOAT_KEYS = {"lr", "pa.norm_eps", "loss.lambda_content", "loss.lambda_style",
               "loss.lambda_contextual", "loss.lambda_identity1",
               "loss.lambda_identity2", "loss.bandwidth", "loss.eps"}


def parse_config(path):
    """Read a flat key=value config file into (train, model, loss) configs.

    Plain keys fill TrainConfig; "pa."/"mff." keys fill the model config;
    "loss." keys fill the loss weights. Unknown keys are rejected.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    train_fields = {f.name for f in fields(TrainConfig)}
    train_kwargs, model_kwargs, loss_kwargs = {}, {}, {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _INT_KEYS:
            value = int(value)
        elif key in _FLOAT_KEYS:
            value = float(value)
        if key in train_fields:
            train_kwargs[key] = value
        elif key == "mff.layers":
            model_kwargs["mff_layers"] = tuple(
                layer.strip() for layer in str(value).split(",") if layer.strip())
        elif key == "mff.se_ratio":
            model_kwargs["se_ratio"] = value
        elif key == "pa.patch_size":
            model_kwargs["patch_size"] = value
        elif key == "pa.norm_eps":
            model_kwargs["norm_eps"] = value
        elif key.startswith("loss."):
            name = key[len("loss."):]
            if name not in {f.name for f in fields(LossConfig)}:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            loss_kwargs[name] = value
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return (TrainConfig(**train_kwargs), ModelConfig(**model_kwargs),
            LossConfig(**loss_kwargs))


def list_images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {directory}")
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise ValueError(f"no images with {IMAGE_EXTENSIONS} in {directory}")
    return paths


def _load_resized(path, resize_short):
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            w, h = img.size
            scale = resize_short / min(w, h)
            img = img.resize((max(1, round(w * scale)), max(1, round(h * scale))),
                             Image.BILINEAR)
            return np.asarray(img, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        warnings.warn(f"skipping undecodable image {path}: {exc}")
        return None


def _sample_crop(paths, cfg, rng):
    for _ in range(100):
        image = _load_resized(paths[int(rng.integers(len(paths)))], cfg.resize_short)
        if image is None:
            continue
        h, w = image.shape[:2]
        if h < cfg.crop or w < cfg.crop:
            warnings.warn(f"skipping image smaller than crop after resize ({h}x{w})")
            continue
        top = int(rng.integers(h - cfg.crop + 1))
        left = int(rng.integers(w - cfg.crop + 1))
        return image[top:top + cfg.crop, left:left + cfg.crop]
    raise ValueError("could not sample a usable image after 100 attempts")


def prepare_batch(content_paths, style_paths, cfg, rng):
    """Sample one batch of independently drawn content/style crops.

    Returns two (B, 3, crop, crop) float tensors in [0, 1]. Deterministic
    given the rng state.
    """
    content = [_sample_crop(content_paths, cfg, rng) for _ in range(cfg.batch_size)]
    style = [_sample_crop(style_paths, cfg, rng) for _ in range(cfg.batch_size)]
    to_tensor = lambda stack: torch.from_numpy(
        np.stack(stack).transpose(0, 3, 1, 2).copy())
    return to_tensor(content), to_tensor(style)


def train_step(model, optimizer, content_batch, style_batch, loss_cfg):
    """One optimization step; returns the loss breakdown.

    Raises NonFiniteLossError (naming the term) before any parameter is
    touched, so an aborted step leaves the state unchanged.
    """
    encoder = model.encoder
    with torch.no_grad():
        feats_c = encoder(content_batch)
        feats_s = encoder(style_batch)
    merged, _ = model.stylize_features(feats_c, feats_s)
    synth = model.decoder(merged)
    synth_feats = encoder(synth)
    i_cc = model.decoder(model.identity_features(feats_c))
    i_ss = model.decoder(model.identity_features(feats_s))
    id1, id2 = identity_loss(i_cc, content_batch, i_ss, style_batch,
                             encoder, loss_cfg, feats_c=feats_c, feats_s=feats_s)
    breakdown = total_loss(content=content_loss(synth_feats, feats_c, loss_cfg),
                           style=style_loss(synth_feats, feats_s, loss_cfg),
                           contextual=contextual_loss(synth_feats, feats_s, loss_cfg),
                           identity1=id1, identity2=id2, cfg=loss_cfg)
    optimizer.zero_grad()
    breakdown.total.backward()
    optimizer.step()
    return breakdown


def _optimizer_extras(optimizer, params):
    extras = {}
    for i, param in enumerate(params):
        state = optimizer.state.get(param)
        if not state:
            continue
        extras[f"{TRAIN_PREFIX}opt.{i}.step"] = np.asarray(float(state["step"]))
        extras[f"{TRAIN_PREFIX}opt.{i}.exp_avg"] = state["exp_avg"].numpy()
        extras[f"{TRAIN_PREFIX}opt.{i}.exp_avg_sq"] = state["exp_avg_sq"].numpy()
    return extras


def _restore_optimizer(optimizer, params, extras):
    for i, param in enumerate(params):
        key = f"{TRAIN_PREFIX}opt.{i}.step"
        if key not in extras:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(extras[key])),
            "exp_avg": torch.from_numpy(extras[f"{TRAIN_PREFIX}opt.{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(
                extras[f"{TRAIN_PREFIX}opt.{i}.exp_avg_sq"].copy()),
        }


def _save_state(model, path, optimizer, params, rng, step):
    extras = _optimizer_extras(optimizer, params)
    extras[f"{TRAIN_PREFIX}step"] = np.asarray(step, dtype=np.int64)
    rng_json = json.dumps(rng.bit_generator.state)
    extras[f"{TRAIN_PREFIX}rng"] = np.frombuffer(rng_json.encode("utf-8"),
                                                 dtype=np.uint8)
    return save_checkpoint(model, path, extras)


def train(cfg, model_cfg=None, loss_cfg=None, resume=None, log=print, encoder=None):
    """Run the full loop; returns the final checkpoint path.

    Writes step-tagged checkpoints under cfg.out_dir plus a losses.csv
    with one row per step. `resume` restores model, optimizer moments,
    RNG state, and the step counter from an earlier checkpoint. A
    preloaded encoder may be passed to skip reloading the weights file.
    """
    model_cfg = model_cfg or ModelConfig()
    loss_cfg = loss_cfg or LossConfig()
    content_paths = list_images(cfg.content_dir)
    style_paths = list_images(cfg.style_dir)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    if encoder is None:
        encoder = load_encoder(cfg.encoder_weights or default_weights_path())
    rng = np.random.default_rng(cfg.seed)
    start_step = 0
    if resume is None:
        model = StyleMixer(encoder, model_cfg)
    else:
        model, extras = load_checkpoint(resume, encoder)
        start_step = int(extras[f"{TRAIN_PREFIX}step"])
        rng.bit_generator.state = json.loads(
            bytes(extras[f"{TRAIN_PREFIX}rng"]).decode("utf-8"))
    params = list(model.trainable_parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    if resume is not None:
        _restore_optimizer(optimizer, params, extras)

    checksum_before = parameter_checksum(encoder)
    csv_path = out_dir / "losses.csv"
    write_header = not (resume is not None and csv_path.is_file())
    csv_file = open(csv_path, "w" if write_header else "a", newline="")
    writer = csv.writer(csv_file)
    if write_header:
        writer.writerow(["step", "total", "content", "style", "contextual",
                         "identity1", "identity2"])

    last_path = _save_state(model, out_dir / f"checkpoint_{start_step:06d}.npz",
                            optimizer, params, rng, start_step)
    try:
        for step in range(start_step + 1, cfg.max_steps + 1):
            content_batch, style_batch = prepare_batch(content_paths, style_paths,
                                                       cfg, rng)
            breakdown = train_step(model, optimizer, content_batch, style_batch,
                                   loss_cfg)
            values = breakdown.floats()
            writer.writerow([step] + [f"{values[k]:.6f}" for k in
                                      ("total", "content", "style", "contextual",
                                       "identity1", "identity2")])
            csv_file.flush()
            if log is not None and (step % 10 == 0 or step == start_step + 1):
                log(f"step {step}/{cfg.max_steps} total {values['total']:.4f}")
            if step % cfg.checkpoint_every == 0 or step == cfg.max_steps:
                last_path = _save_state(model, out_dir / f"checkpoint_{step:06d}.npz",
                                        optimizer, params, rng, step)
    finally:
        csv_file.close()
    if parameter_checksum(encoder) != checksum_before:
        raise RuntimeError("frozen encoder parameters changed during training")
    return last_path
