"""Acceptance criteria 1-8.  Each test records one PASS/FAIL line that is
printed in the terminal summary."""

import math
import time

import numpy as np
import pytest
import torch

from selfcollage.backbone import BackboneSpec, load_backbone
from selfcollage.clustering import ClusterModel, assign, fit_kmeans
from selfcollage.composer import Composer, ComposerConfig, cut_object
from selfcollage.datasets import EvalRecord, ShapeParams, noise_background_source, synthetic_shape_source
from selfcollage.evaluation import count_components, grid_configs, kendall_tau, split_by_count
from selfcollage.inference import InferenceConfig, count_image, needs_tiling, window_starts
from selfcollage.io import resize_field
from selfcollage.model import CountingModel, ModelConfig, encode_exemplar_features
from selfcollage.semantic import semantic_count
from selfcollage.training import TrainConfig, masked_scaled_mse, sample_seed, train

from conftest import record_acceptance
from stubs import BLUE, RED, ColourOracleModel, ScaledMapModel, two_type_scene
from test_evaluation import brute_tau_b, flood_fill_count


def check(number, name, ok, detail=""):
    record_acceptance(number, name, bool(ok), detail)
    assert ok, f"criterion {number} ({name}) failed: {detail}"


def tiny_model(seed=0, **kw):
    cfg = dict(backbone=BackboneSpec("tiny-vit", patch_size=8, depth=1, heads=4, width=16),
               fim_dim=16, fim_blocks=1, fim_heads=2, fim_mlp_dim=32, decoder_channels=8,
               decoder_blocks=2, decoder_groups=2, exemplar_height=16, exemplar_width=16, seed=seed)
    cfg.update(kw)
    torch.manual_seed(seed)
    return CountingModel(ModelConfig(**cfg))


# -- 1 ----------------------------------------------------------------------

def test_1_composer_invariants():
    backbone = load_backbone(BackboneSpec("handcrafted", patch_size=8))
    objects = synthetic_shape_source(ShapeParams(), 1000, seed=0)
    backgrounds = noise_background_source(50, 224, seed=0)
    clusters = fit_kmeans(objects.embeddings(backbone), 36, seed=0)
    config = ComposerConfig()
    assert (config.t_min, config.t_max, config.n_min, config.n_max) == (2, 2, 3, 20)
    assert (config.d_min, config.d_max, config.sigma) == (15, 70, 0.3)
    composer = Composer(config, objects, backgrounds, clusters)

    start = time.time()
    failures = []
    for seed in range(1000):
        s = composer(seed)
        targets = [p for p in s.placed if p.is_target]
        target_cluster = targets[0].cluster_id
        problems = []
        if abs(float(s.density.sum()) - s.count) > 1e-3:
            problems.append("density sum")
        if len(s.placed) != 20:
            problems.append("placed")
        # purity: one target cluster, no non-target from it, exemplars are targets
        if any(p.cluster_id != target_cluster for p in targets):
            problems.append("mixed targets")
        if any(p.cluster_id == target_cluster for p in s.placed if not p.is_target):
            problems.append("non-target in target cluster")
        if len(s.exemplar_boxes) != 3 or not all(b in s.target_boxes for b in s.exemplar_boxes):
            problems.append("exemplars")
        # layering: no non-target owns a pixel a target covers by more than half
        # (at exactly 0.5 both layers carry equal weight)
        opaque = np.zeros(s.owner.shape, bool)
        for p in targets:
            item = objects[p.source_index]
            _, m = cut_object(item.image, item.mask)
            x, y, w, h = p.box
            opaque[y:y + h, x:x + w] |= resize_field(m, h, w) > 0.5
        non_target = np.array([not p.is_target for p in s.placed] + [False])
        if (non_target[s.owner] & opaque).any():
            problems.append("layering")
        if problems:
            failures.append((seed, problems))
    elapsed = time.time() - start
    check(1, "composer invariants over 1000 seeds", not failures and elapsed < 120,
          f"{len(failures)} failing seeds, {elapsed:.1f}s")


# -- 2 ----------------------------------------------------------------------

def test_2_determinism(small_composer, tmp_path):
    a, b = small_composer(123), small_composer(123)
    compose_ok = (a.image.tobytes() == b.image.tobytes() and a.density.tobytes() == b.density.tobytes()
                  and a.placed == b.placed)

    cfg = TrainConfig(batch_size=4, epochs=1, samples_per_epoch=8, max_lr=1e-3, seed=5)
    states = []
    for k in range(2):
        model = tiny_model(0)
        res = train(model, small_composer, cfg, tmp_path / f"r{k}")
        states.append((res.losses, [p.detach().numpy().tobytes() for p in model.trainable_parameters()]))
    train_ok = len(states[0][0]) == 2 and states[0] == states[1]

    image = np.random.default_rng(0).integers(0, 256, (300, 500, 3), dtype=np.uint8)
    boxes = [(20, 30, 40, 40), (100, 80, 30, 50)]
    counts = []
    for _ in range(2):
        model = tiny_model(3)
        torch.nn.init.normal_(model.decoder.head.weight, std=0.1)
        res = count_image(model, image, boxes, InferenceConfig())
        counts.append((res.count, res.density.tobytes()))
    count_ok = counts[0] == counts[1]
    check(2, "compose / train / count_image bit-reproducible", compose_ok and train_ok and count_ok,
          f"compose={compose_ok} train={train_ok} count={count_ok}")


# -- 3 ----------------------------------------------------------------------

def test_3_oracle_equivalences():
    rng = np.random.default_rng(0)
    tau_err = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 40))
        x = rng.integers(0, 8, n).astype(float) + (rng.random(n) < 0.5) * rng.random(n)
        y = rng.integers(0, 8, n).astype(float)
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        tau_err = max(tau_err, abs(kendall_tau(x, y) - brute_tau_b(x, y)))

    assign_ok = True
    for _ in range(200):
        c = rng.normal(size=(int(rng.integers(1, 20)), 6))
        e = rng.normal(size=6)
        brute = min(range(len(c)), key=lambda j: (sum((e[i] - c[j][i]) ** 2 for i in range(6)), j))
        assign_ok &= assign(ClusterModel(c, np.zeros(1, int), 0.0), e) == brute

    cc_ok = True
    for _ in range(50):
        binary = rng.random((int(rng.integers(5, 30)), int(rng.integers(5, 30)))) < rng.uniform(0.2, 0.7)
        cc_ok &= count_components(binary) == flood_fill_count(binary)

    feats = rng.normal(size=(2, 4, 5, 6)).astype(np.float32)
    attn = rng.random((2, 4, 5)).astype(np.float32)
    got = encode_exemplar_features(torch.from_numpy(feats), torch.from_numpy(attn)).numpy()
    enc_err = 0.0
    for n in range(2):
        for k in range(6):
            num = den = 0.0
            for i in range(4):
                for j in range(5):
                    num += float(attn[n, i, j]) * float(feats[n, i, j, k])
                    den += float(attn[n, i, j])
            enc_err = max(enc_err, abs(got[n, k] - num / den))
    check(3, "oracle equivalences", tau_err <= 1e-12 and assign_ok and cc_ok and enc_err <= 1e-5,
          f"tau err {tau_err:.1e}, assign={assign_ok}, cc={cc_ok}, encoding err {enc_err:.1e}")


# -- 4 ----------------------------------------------------------------------

def test_4_gradient_check():
    model = tiny_model(0).double()
    torch.nn.init.normal_(model.decoder.head.weight, std=0.5)
    images = torch.rand(1, 3, 32, 32, dtype=torch.float64)
    ex = torch.rand(1, 2, 3, 16, 16, dtype=torch.float64)
    target = torch.rand(1, 32, 32, dtype=torch.float64) * 0.01
    keep = (torch.rand(1, 32, 32) > 0.2).double()
    feats = model.encode_image(images)
    grid_ok = feats.shape[1:] == (4, 4, 16)

    def loss():
        return masked_scaled_mse(model.forward_features(feats, ex, (32, 32)), target, keep, 3000.0)

    model.zero_grad()
    loss().backward()
    params = list(model.trainable_parameters())
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        p = params[rng.integers(len(params))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        analytic = float(p.grad[idx])
        with torch.no_grad():
            orig = float(p[idx])
            p[idx] = orig + 1e-6
            up = float(loss())
            p[idx] = orig - 1e-6
            down = float(loss())
            p[idx] = orig
        numeric = (up - down) / 2e-6
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-7))
    check(4, "finite-difference gradient check", grid_ok and worst <= 1e-3, f"worst relative error {worst:.2e}")


# -- 5 ----------------------------------------------------------------------

def test_5_protocol_exactness():
    windows = window_starts(640, 384, 128) == [0, 128, 256]

    boxes = [(10, 10, 20, 20), (50, 10, 20, 20), (90, 10, 20, 20)]
    d = np.zeros((384, 384))
    for x, y, w, h in boxes:
        d[y:y + h, x:x + w] = 2.0 / (w * h)
    d[-1, -1] += 60 - d.sum()
    res = count_image(ScaledMapModel(d), np.zeros((384, 384, 3), np.uint8), boxes, InferenceConfig())
    ttn = abs(res.count - 30) < 1e-6

    cfg = InferenceConfig()
    tiling = (needs_tiling([(0, 0, 9, 9)], cfg) and not needs_tiling([(0, 0, 9, 10)], cfg)
              and not needs_tiling([(0, 0, 10, 9)], cfg))

    parts = split_by_count([EvalRecord("", [], c) for c in (16, 17, 40, 41)])
    routing = {r.count: k for k, v in parts.items() for r in v} == {16: "low", 17: "medium", 40: "medium",
                                                                       41: "high"}
    grid = len(set(grid_configs(12))) == 792
    check(5, "protocol exactness", windows and ttn and tiling and routing and grid,
          f"windows={windows} ttn={ttn} tiling={tiling} routing={routing} grid={grid}")


# -- 6 ----------------------------------------------------------------------

DESK_SPEC = BackboneSpec("tiny-vit", patch_size=8, depth=2, heads=4, width=96)
DESK_MODEL = dict(fim_dim=64, fim_heads=4, fim_mlp_dim=256, decoder_channels=32, decoder_blocks=3,
                  exemplar_height=16, exemplar_width=16)
DESK_TRAIN = TrainConfig(batch_size=16, epochs=60, samples_per_epoch=3000, sample_pool=3000, max_lr=1e-3)


def _desk_predictions(model, composer, test):
    preds = []
    for i, s in enumerate(test):
        ex, _ = composer.exemplars(s, 3, np.random.default_rng(i))
        preds.append(float(model.predict_density(s.image, ex).sum()))
    return np.array(preds)


@pytest.mark.slow
def test_6_desk_scale_training():
    torch.manual_seed(0)
    model = CountingModel(ModelConfig(backbone=DESK_SPEC, **DESK_MODEL))
    objects = synthetic_shape_source(ShapeParams(size_range=(24, 24)), 1440, 0)
    backgrounds = noise_background_source(500, 64, 0)
    clusters = fit_kmeans(objects.embeddings(model.backbone), 36, seed=0)
    composer = Composer(ComposerConfig(n_min=3, n_max=9, d_min=10, d_max=18, height=64, width=64,
                                       exemplar_height=16, exemplar_width=16), objects, backgrounds, clusters)
    held_out = [10**6 + i for i in range(200)]
    assert not set(held_out) & {sample_seed(DESK_TRAIN.seed, i) for i in range(DESK_TRAIN.sample_pool)}
    test = [composer(s) for s in held_out]
    truth = np.array([s.count for s in test], float)

    untrained_mae = float(np.abs(_desk_predictions(model, composer, test) - truth).mean())
    result = train(model, composer, DESK_TRAIN)
    preds = _desk_predictions(model, composer, test)
    mae = float(np.abs(preds - truth).mean())
    average_mae = float(np.abs(truth.mean() - truth).mean())
    tau = kendall_tau(preds, truth)
    minutes = result.seconds / 60
    check(6, "desk-scale end-to-end training",
          mae < average_mae and mae < untrained_mae and tau >= 0.5 and minutes <= 45,
          f"MAE {mae:.3f} (average {average_mae:.3f}, untrained {untrained_mae:.3f}), tau {tau:.3f}, "
          f"train {minutes:.1f} min CPU")


# -- 7 ----------------------------------------------------------------------

def test_7_exemplar_permutation_invariance():
    model = tiny_model(1)
    torch.nn.init.normal_(model.decoder.head.weight)
    image = torch.rand(1, 3, 32, 32)
    ex = torch.rand(1, 3, 3, 16, 16)
    ref = model(image, ex).detach().numpy().tobytes()
    rng = np.random.default_rng(0)
    same = sum(model(image, ex[:, rng.permutation(3)]).detach().numpy().tobytes() == ref for _ in range(20))
    check(7, "bitwise exemplar permutation invariance", same == 20, f"{same}/20 permutations identical")


# -- 8 ----------------------------------------------------------------------

def test_8_semantic_counting():
    model = ColourOracleModel([RED, BLUE])
    two, terminated, disjoint = 0, 0, 0
    for seed in range(20):
        image, saliency, counts, _ = two_type_scene(seed)
        res = semantic_count(model, image, attention=saliency)
        two += len(res.categories) == 2
        peaks = res.attention_peaks
        cap = math.ceil(saliency.size / 25)
        mass = res.attention_mass
        terminated += (res.stop_reason != "iteration cap" and len(res.categories) <= cap
                       and all(a >= b for a, b in zip(peaks, peaks[1:]))
                       and all(a > b for a, b in zip(mass, mass[1:])))
        singles = [np.maximum(model.predict_density(image, [c.exemplar]), 0) for c in res.categories]
        total = sum(c.density for c in res.categories)
        disjoint += bool(np.all(total <= np.max(singles, axis=0) + 1e-9))
    check(8, "semantic counting on two-type scenes", two >= 16 and terminated == 20 and disjoint == 20,
          f"{two}/20 with two categories, {terminated}/20 terminated, {disjoint}/20 disjoint")
