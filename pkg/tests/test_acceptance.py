"""End-to-end acceptance checks, one per numbered criterion.

Each test prints a single "criterion NN PASS/FAIL" line so the suite
doubles as a checklist. The toy training run behind criterion 9 is the
expensive part; everything else runs in seconds.
"""

import csv
import math
import time

import numpy as np
import pytest
import torch
from PIL import Image

import oracles
from conftest import make_blob_image
from style_mixer.cli import main
from style_mixer.encoder import encode
from style_mixer.fusion import (RegionLabeling, assign_styles, cluster_content,
                                compose_hybrid, kmeans)
from style_mixer.images import load_image
from style_mixer.losses import (LossConfig, content_loss, contextual_loss,
                                identity_loss, style_loss)
from style_mixer.model import ModelConfig, StyleMixer
from style_mixer.patch_attention import PatchAttention, attention_map, confidence


def report(capsys, num, desc, fn):
    try:
        fn()
    except BaseException:
        with capsys.disabled():
            print(f"criterion {num:02d} FAIL: {desc}")
        raise
    with capsys.disabled():
        print(f"criterion {num:02d} PASS: {desc}")


def conv1x1_params(conv):
    c = conv.weight.shape[0]
    return (conv.weight.detach().numpy().reshape(c, c).astype(np.float64),
            conv.bias.detach().numpy().astype(np.float64))


def pointwise_attention_reference(pa, content, style, fused):
    """Point-wise style attention written out step by step in numpy."""
    def project(conv, feat):
        w, b = conv1x1_params(conv)
        c = feat.shape[0]
        return w @ feat.reshape(c, -1) + b[:, None]

    pc = project(pa.theta_c, oracles.channel_norm(content))
    ps = project(pa.theta_s, oracles.channel_norm(style))
    s = pc.T @ ps
    m = oracles.softmax_rows(s)
    pf = project(pa.theta_fused, np.asarray(fused, dtype=np.float64))
    out = (m @ pf.T).T.reshape(content.shape)
    conf = (s * m).sum(axis=1).reshape(content.shape[1:])
    return out, conf


def test_criterion_01_patch_attention_reduces_to_pointwise(capsys):
    def check():
        start = time.time()
        torch.manual_seed(101)
        pa = PatchAttention(channels=16, patch_size=1).double()
        rng = np.random.default_rng(101)
        worst = 0.0
        for _ in range(100):
            content = rng.standard_normal((16, 4, 4))
            style = rng.standard_normal((16, 4, 4))
            fused = rng.standard_normal((16, 4, 4))
            got_out, got_conf = pa(torch.tensor(content), torch.tensor(style),
                                   torch.tensor(fused))
            ref_out, ref_conf = pointwise_attention_reference(pa, content,
                                                              style, fused)
            worst = max(worst,
                        float(np.abs(got_out.detach().numpy() - ref_out).max()),
                        float(np.abs(got_conf.detach().numpy() - ref_conf).max()))
        assert worst <= 1e-6, f"max abs diff {worst}"
        assert time.time() - start < 60.0

    report(capsys, 1, "patch attention at p=1 equals point-wise attention",
           check)


def test_criterion_02_attention_rows_are_stochastic(capsys):
    def check():
        rng = np.random.default_rng(102)
        worst = 0.0
        for i in range(1000):
            nc, ns = int(rng.integers(1, 13)), int(rng.integers(1, 13))
            if i % 10 == 0:
                scores = rng.choice([-50.0, 50.0], size=(nc, ns))
            else:
                scores = rng.uniform(-50.0, 50.0, size=(nc, ns))
            m = attention_map(torch.tensor(scores, dtype=torch.float32))
            sums = m.sum(dim=-1).numpy()
            worst = max(worst, float(np.abs(sums - 1.0).max()))
        assert worst <= 1e-6, f"max row-sum error {worst}"

    report(capsys, 2, "attention rows sum to 1 under extreme scores", check)


def test_criterion_03_confidence_closed_forms(capsys):
    def check():
        for c in (-50.0, -1.0, 0.0, 1e-3, 7.0, 50.0):
            scores = torch.full((9, 5), c, dtype=torch.float64)
            conf = confidence(scores, attention_map(scores))
            assert float((conf - c).abs().max()) <= 1e-6
        rng = np.random.default_rng(103)
        scores = torch.tensor(rng.uniform(-50, 50, size=(7, 1)))
        conf = confidence(scores, attention_map(scores))
        assert torch.equal(conf, scores.squeeze(-1))

    report(capsys, 3, "constant scores give conf=c; single style gives conf=S",
           check)


def test_criterion_04_contextual_loss_value_and_gradient(capsys):
    def check():
        start = time.time()
        rng = np.random.default_rng(104)
        cfg = LossConfig(cx_layers=("relu3_1",))
        for _ in range(25):
            channels = int(rng.integers(2, 9))
            x = rng.standard_normal((3, channels))
            y = rng.standard_normal((3, channels))
            synth = {"relu3_1": torch.tensor(x.T.reshape(channels, 3, 1))}
            style = {"relu3_1": torch.tensor(y.T.reshape(channels, 3, 1))}
            got = contextual_loss(synth, style, cfg).item()
            want = oracles.contextual_layer(x, y, bw=cfg.bandwidth, eps=cfg.eps)
            assert abs(got - want) <= 1e-10, f"value off by {abs(got - want)}"

        feat = torch.tensor(rng.standard_normal((4, 8, 8)), requires_grad=True)
        style = {"relu3_1": torch.tensor(rng.standard_normal((4, 8, 8)))}
        contextual_loss({"relu3_1": feat}, style, cfg).backward()
        informative = 0
        for _ in range(16):
            idx = tuple(int(rng.integers(d)) for d in feat.shape)
            delta = 1e-6
            with torch.no_grad():
                feat[idx] += delta
                plus = contextual_loss({"relu3_1": feat}, style, cfg).item()
                feat[idx] -= 2 * delta
                minus = contextual_loss({"relu3_1": feat}, style, cfg).item()
                feat[idx] += delta
            fd = (plus - minus) / (2 * delta)
            grad = feat.grad[idx].item()
            if max(abs(fd), abs(grad)) > 1e-6:
                informative += 1
            assert oracles.fd_close(fd, grad), (
                f"gradient mismatch at {idx}: fd {fd} vs backprop {grad}")
        assert informative >= 5
        assert time.time() - start < 120.0

    report(capsys, 4, "contextual loss matches oracle and finite differences",
           check)


def brute_force_assignment(labels, k, confs):
    mapping = {}
    for r in range(k):
        best_style, best_total = 0, None
        for s, conf in enumerate(confs):
            total = math.fsum(float(v) for v in conf[labels == r].ravel())
            if best_total is None or total > best_total:
                best_style, best_total = s, total
        mapping[r] = best_style
    return mapping


def test_criterion_05_region_assignment_matches_brute_force(capsys):
    def check():
        rng = np.random.default_rng(105)
        for i in range(500):
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            k = int(rng.integers(1, min(5, h * w) + 1))
            num_styles = int(rng.integers(1, 6))
            labels = rng.integers(0, k, size=(h, w)).astype(np.int64)
            if i % 5 == 0:
                confs = [rng.integers(0, 3, size=(h, w)).astype(np.float64)
                         for _ in range(num_styles)]
                if num_styles > 1:
                    confs[1] = confs[0].copy()  # exact tie on every region
            else:
                confs = [rng.uniform(-5, 5, size=(h, w))
                         for _ in range(num_styles)]
            regions = RegionLabeling(labels=labels, k=k,
                                     centroids=np.zeros((k, 3)))
            got = assign_styles(regions, confs).region_to_style
            want = brute_force_assignment(labels, k, confs)
            assert got == want, f"instance {i}: {got} vs {want}"

    report(capsys, 5, "region style assignment agrees with brute force", check)


def test_criterion_06_single_style_mst_equals_sst(capsys, tmp_path,
                                                  quick_checkpoint,
                                                  encoder_weights_path):
    def check():
        rng = np.random.default_rng(106)
        style_path = tmp_path / "style.png"
        Image.fromarray(make_blob_image(rng, size=48)).save(style_path)
        sizes = [(48, 48), (56, 40), (64, 64), (40, 56), (33, 47)]
        for i, (w, h) in enumerate(sizes):
            content = Image.fromarray(make_blob_image(rng, size=64)).resize((w, h))
            content_path = tmp_path / f"content_{i}.png"
            content.save(content_path)
            sst_out = tmp_path / f"sst_{i}.png"
            mst_out = tmp_path / f"mst_{i}.png"
            base = ["--content", str(content_path), "--style", str(style_path),
                    "--checkpoint", str(quick_checkpoint),
                    "--encoder-weights", str(encoder_weights_path)]
            assert main(["sst"] + base + ["--out", str(sst_out)]) == 0
            assert main(["mst"] + base + ["--out", str(mst_out), "--k", "3"]) == 0
            a = load_image(sst_out).astype(np.float64)
            b = load_image(mst_out).astype(np.float64)
            assert np.abs(a - b).max() <= 1e-5, f"image {i} differs"

    report(capsys, 6, "one-style multi-style run reproduces the single-style "
                      "output", check)


def test_criterion_07_hybrid_composition_is_exclusive(capsys):
    def check():
        rng = np.random.default_rng(107)
        for _ in range(20):
            num_styles = int(rng.integers(2, 5))
            k = int(rng.integers(1, 5))
            h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            channels = num_styles
            sentinels = []
            for s in range(num_styles):
                feat = torch.zeros(channels, h, w)
                feat[s] = 10.0 + s  # orthogonal constant per style
                sentinels.append(feat)
            labels = rng.integers(0, k, size=(h, w)).astype(np.int64)
            regions = RegionLabeling(labels=labels, k=k,
                                     centroids=np.zeros((k, 3)))
            confs = [rng.uniform(0, 1, size=(h, w)) for _ in range(num_styles)]
            assignment = assign_styles(regions, confs)
            hybrid = compose_hybrid(assignment, regions, sentinels)
            for y in range(h):
                for x in range(w):
                    vec = hybrid[:, y, x]
                    matches = [s for s in range(num_styles)
                               if torch.equal(vec, sentinels[s][:, y, x])]
                    expected = assignment.region_to_style[int(labels[y, x])]
                    assert matches == [expected], (
                        f"position ({y},{x}) matches {matches}, "
                        f"expected [{expected}]")

    report(capsys, 7, "hybrid features take each position from exactly one "
                      "style", check)


def test_criterion_08_clustering_behaviour(capsys):
    def check():
        rng = np.random.default_rng(108)
        points = rng.standard_normal((200, 5))
        first = kmeans(points, 4, seed=11)
        second = kmeans(points, 4, seed=11)
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])
        assert first[2] == second[2]

        for trial in range(10):
            pts = rng.standard_normal((100, 4)) * (trial + 1)
            _, _, history = kmeans(pts, 5, seed=trial)
            for a, b in zip(history, history[1:]):
                assert b <= a * (1 + 1e-12), f"inertia rose: {a} -> {b}"

        blob_a = rng.standard_normal((30, 3)) * 0.1
        blob_b = rng.standard_normal((30, 3)) * 0.1 + 10.0
        pts = np.concatenate([blob_a, blob_b])
        labels, _, _ = kmeans(pts, 2, seed=0)
        assert len(set(labels[:30])) == 1
        assert len(set(labels[30:])) == 1
        assert labels[0] != labels[30]

    report(capsys, 8, "k-means is deterministic, monotone, and separates two "
                      "blobs", check)


def test_criterion_09_toy_training_descends(capsys, toy_run):
    def check():
        assert toy_run["elapsed"] <= 1800.0, (
            f"run took {toy_run['elapsed']:.0f}s")
        with open(toy_run["out_dir"] / "losses.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 200
        totals = [float(r["total"]) for r in rows]
        first = sum(totals[:20]) / 20
        last = sum(totals[-20:]) / 20
        assert last <= 0.70 * first, (
            f"final average {last:.2f} vs initial {first:.2f} "
            f"(ratio {last / first:.3f})")
        assert (toy_run["encoder_checksum_after"]
                == toy_run["encoder_checksum_before"])

        with np.load(toy_run["out_dir"] / "checkpoint_000000.npz") as init, \
                np.load(toy_run["final_checkpoint"]) as final:
            updated = {"mff": False, "pa": False, "decoder": False,
                       "amplifier": False}
            for name in final.files:
                group = name.split(".", 1)[0]
                if group in updated and not np.array_equal(init[name],
                                                           final[name]):
                    updated[group] = True
        assert all(updated.values()), f"stale groups: {updated}"

    report(capsys, 9, "toy training reduces the loss without touching the "
                      "encoder", check)


def test_criterion_10_identity_gradient_reaches_attention(capsys, encoder):
    def check():
        torch.manual_seed(110)
        model = StyleMixer(encoder, ModelConfig())
        rng = np.random.default_rng(110)
        image = torch.tensor(
            make_blob_image(rng, size=64).astype(np.float32) / 255.0
        ).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            feats = encoder(image)
        i_cc = model.decoder(model.identity_features(feats))
        cfg = LossConfig()
        id1, id2 = identity_loss(i_cc, image, i_cc, image, encoder, cfg)
        loss = cfg.lambda_identity1 * id1 + cfg.lambda_identity2 * id2
        loss.backward()
        for name, param in model.pa.named_parameters():
            assert param.grad is not None, f"{name} got no gradient"
            assert float(param.grad.abs().max()) > 0.0, f"{name} gradient is zero"

    report(capsys, 10, "identity loss trains the attention branch on "
                       "identical inputs", check)


def test_criterion_11_loss_degeneracies_and_invariances(capsys, encoder):
    def check():
        rng = np.random.default_rng(111)
        cfg = LossConfig()
        feats = {layer: torch.tensor(rng.standard_normal((8, 4, 4)) * 10,
                                     dtype=torch.float64)
                 for layer in cfg.style_layers}
        assert content_loss(feats, feats, cfg).item() == 0.0
        assert style_loss(feats, feats, cfg).item() == 0.0
        image = torch.tensor(rng.random((1, 3, 32, 32)), dtype=torch.float32)
        other = torch.tensor(rng.random((1, 3, 32, 32)), dtype=torch.float32)
        id1, id2 = identity_loss(image, image, other, other, encoder, cfg)
        assert id1.item() == 0.0 and id2.item() == 0.0

        style_ref = {layer: torch.tensor(rng.standard_normal((8, 4, 4)) * 10,
                                         dtype=torch.float64)
                     for layer in cfg.style_layers}
        base_style = style_loss(feats, style_ref, cfg).item()
        permuted = {}
        for layer, feat in feats.items():
            c, h, w = feat.shape
            perm = torch.randperm(h * w)
            permuted[layer] = feat.reshape(c, -1)[:, perm].reshape(c, h, w)
        moved = style_loss(permuted, style_ref, cfg).item()
        assert abs(moved - base_style) <= 1e-6

        base_content = content_loss(feats, style_ref, cfg).item()
        transformed = {}
        for layer, feat in feats.items():
            scale = torch.tensor(rng.uniform(0.5, 4.0, (feat.shape[0], 1, 1)))
            shift = torch.tensor(rng.uniform(-3.0, 3.0, (feat.shape[0], 1, 1)))
            transformed[layer] = feat * scale + shift
        changed = content_loss(transformed, style_ref, cfg).item()
        assert abs(changed - base_content) <= 1e-6

    report(capsys, 11, "loss terms hit their exact zeros and invariances",
           check)
