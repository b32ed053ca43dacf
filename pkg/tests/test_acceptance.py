"""Acceptance gate: eleven end-to-end checks at fixed tolerances.

Each check prints a single PASS/FAIL line with the measured quantity.
Run `pytest tests/test_acceptance.py -v -s` to see the lines as they go;
the transfer-trend fixture trains nine small models and dominates the
runtime (a few minutes on CPU).
"""

import math
import time

import numpy as np
import pytest
import torch

from hsida.backbone import BackboneConfig, ReversibleBackbone
from hsida.data import (SceneSpec, extract_patches, random_prototypes,
                        synth_domain_pair, zscore_normalize)
from hsida.disentangle import (DomainDiscriminator, DomainInvariantEncoder,
                               apply_mask, channel_scores, gap,
                               invariant_mask, specific_mask)
from hsida.evaluate import (confusion_matrix, evaluate, metrics_from_confusion,
                            pooled_feature_stds)
from hsida.objective import (LossWeights, cls_loss, domain_adv_loss,
                             ortho_loss, total_loss)
from hsida.ssam import (ema_step, pooled_channel_variances, shifted_sigmoid)
from hsida.trainer import (Network, TrainConfig, load_checkpoint,
                           save_checkpoint, train)


def _report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"criterion {num:2d} ({name}): {status}  {detail}", flush=True)
    assert ok, f"criterion {num} ({name}) {detail}"


def test_01_invertibility():
    start = time.time()
    worst = 0.0
    torch.manual_seed(0)
    for n in (1, 2, 3, 4):
        net = ReversibleBackbone(6, BackboneConfig(stem_out_channels=16,
                                                   num_blocks=n,
                                                   hidden_channels=8))
        # move the normalization statistics off their init values first
        net.train()
        with torch.no_grad():
            net(torch.randn(32, 6, 7, 7))
        net.eval()
        with torch.no_grad():
            x = torch.randn(100, 16, 7, 7)
            err = (net.rfe_inverse(net.rfe_forward(x)) - x).abs().max().item()
        worst = max(worst, err)
    elapsed = time.time() - start
    _report(1, "invertibility", worst <= 1e-4 and elapsed < 10.0,
            f"max-abs error {worst:.2e} in {elapsed:.1f}s")


def test_02_additivity():
    torch.manual_seed(1)
    die = DomainInvariantEncoder(16)
    die.eval()
    worst = 0.0
    with torch.no_grad():
        for _ in range(100):
            fb = torch.randn(4, 16, 5, 5)
            f_di, f_ds = die.split(fb)
            worst = max(worst, (f_di + f_ds - fb).abs().max().item())
    _report(2, "additivity", worst <= 1e-6, f"max-abs residual {worst:.2e}")


def _oracle_invariant(w, budget):
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))
    mask = np.ones(len(w), dtype=np.float32)
    for i in order[:budget]:
        if w[i] > 0:
            mask[i] = 0.0
    return mask


def _oracle_specific(w, budget):
    order = sorted(range(len(w)), key=lambda i: (abs(w[i]), i))
    mask = np.ones(len(w), dtype=np.float32)
    for i in order[:budget]:
        mask[i] = 0.0
    return mask


def test_03_mask_correctness():
    rng = np.random.default_rng(2)
    checked = 0
    for trial in range(1000):
        width = int(rng.integers(1, 17))
        if trial % 2 == 0:
            w = rng.normal(size=width)
        else:
            # low-resolution scores force plenty of exact ties
            w = rng.integers(-2, 3, size=width).astype(np.float64) / 2.0
        for budget in range(width + 1):
            assert np.array_equal(invariant_mask(w, budget),
                                  _oracle_invariant(w, budget))
            assert np.array_equal(specific_mask(w, budget),
                                  _oracle_specific(w, budget))
            checked += 2
    _report(3, "mask correctness", True,
            f"{checked} masks matched the sort oracle exactly")


def _fd_scores(disc, pooled, is_source, h_scale=1e-5):
    # h small enough that the central difference never straddles a
    # LeakyReLU kink inside the hidden discriminator
    def loglik(p):
        logits = disc(p)
        return -torch.nn.functional.binary_cross_entropy_with_logits(
            logits, is_source.to(logits.dtype), reduction="sum").item()

    grad = torch.zeros_like(pooled)
    for i in range(pooled.shape[0]):
        for c in range(pooled.shape[1]):
            h = h_scale * (1.0 + abs(pooled[i, c].item()))
            plus = pooled.clone()
            plus[i, c] += h
            minus = pooled.clone()
            minus[i, c] -= h
            grad[i, c] = (loglik(plus) - loglik(minus)) / (2 * h)
    return (pooled * grad).mean(dim=0)


def test_04_score_correctness():
    torch.manual_seed(3)
    worst = 0.0
    for trial in range(20):
        width = 3 + trial % 4
        disc = DomainDiscriminator(width, hidden=(0 if trial % 3 == 0 else 6))
        disc.double()
        pooled = torch.randn(5, width, dtype=torch.float64)
        is_source = (torch.arange(5) % 2).double()
        analytic = channel_scores(disc, pooled, is_source).numpy()
        fd = _fd_scores(disc, pooled, is_source).numpy()
        rel = np.abs(analytic - fd) / np.maximum.reduce(
            [np.abs(analytic), np.abs(fd), np.full_like(fd, 1e-8)])
        worst = max(worst, float(rel.max()))
    _report(4, "score correctness", worst <= 1e-2,
            f"worst elementwise relative error {worst:.2e}")


def test_05_pooled_variance():
    hand = pooled_channel_variances(np.array([[1.0], [3.0]]),
                                    np.array([[2.0], [4.0]]))
    hand_err = abs(hand[0] - 5.0 / 3.0)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        n_s, n_t, width = rng.integers(1, 9, size=3)
        if n_s + n_t < 2:
            n_t += 1
        a = rng.normal(size=(n_s, width))
        b = rng.normal(size=(n_t, width))
        got = pooled_channel_variances(a, b)
        expect = np.var(np.concatenate([a, b]), axis=0, ddof=1)
        worst = max(worst, float(np.max(np.abs(got - expect)
                                        / np.maximum(expect, 1e-300))))
    ok = hand_err <= 1e-9 and worst <= 1e-6
    _report(5, "pooled variance", ok,
            f"hand-case error {hand_err:.1e}, worst relative error {worst:.1e}")


def test_06_ssam_contracts():
    midpoint = shifted_sigmoid(2.5, 1.5, 2.5)
    grid = np.linspace(-5.0, 10.0, 1000)
    values = [shifted_sigmoid(m, 1.5, 2.5) for m in grid]
    monotonic = all(b > a for a, b in zip(values, values[1:]))
    fixed = ema_step(0.37, 0.37, 0.1) == 0.37
    identity0 = ema_step(0.2, 0.9, 0.0) == 0.2
    identity1 = ema_step(0.2, 0.9, 1.0) == 0.9
    ok = midpoint == 0.5 and monotonic and fixed and identity0 and identity1
    _report(6, "monitor contracts", ok,
            f"midpoint {midpoint}, strictly monotonic on 1000 points: "
            f"{monotonic}, EMA identities: {fixed and identity0 and identity1}")


def test_07_gradient_check():
    start = time.time()
    torch.manual_seed(5)
    cfg = TrainConfig(stem_out_channels=8, num_blocks=1, hidden_channels=4,
                      disc_hidden=4, patch_size=5)
    net = Network(6, 3, cfg)
    net.backbone.double()
    net.die.double()
    net.discriminator.double()
    net.classifier.double()
    for module in (net.backbone, net.die, net.discriminator, net.classifier):
        module.eval()

    xs = torch.randn(4, 6, 5, 5, dtype=torch.float64)
    xt = torch.randn(4, 6, 5, 5, dtype=torch.float64)
    ys = torch.tensor([0, 1, 2, 0])
    u = np.ones(8, dtype=np.float32)
    u[[1, 5]] = 0.0
    v = np.ones(8, dtype=np.float32)
    v[[0, 7]] = 0.0
    weights = LossWeights(0.1, 1.0)

    def objective():
        _, fdi_s, fds_s = net.features(xs)
        _, fdi_t, fds_t = net.features(xt)
        cls = cls_loss(net.classifier(apply_mask(fdi_s, u)), ys)
        ortho = ortho_loss(torch.cat([apply_mask(fdi_s, u),
                                      apply_mask(fdi_t, u)]),
                           torch.cat([apply_mask(fds_s, v),
                                      apply_mask(fds_t, v)]))
        dom = domain_adv_loss(net.discriminator, gap(fdi_s), gap(fdi_t),
                              gap(fds_s), gap(fds_t), reverse=False)
        return total_loss(cls, ortho, dom, weights)

    params = [p for m in (net.backbone, net.die, net.discriminator,
                          net.classifier)
              for p in m.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    objective().backward()

    rng = np.random.default_rng(6)
    sizes = np.array([p.numel() for p in params])
    flat_choices = rng.choice(int(sizes.sum()), size=50, replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    with torch.no_grad():
        for flat in flat_choices:
            pi = int(np.searchsorted(bounds, flat, side="right"))
            offset = int(flat - (bounds[pi - 1] if pi else 0))
            param = params[pi]
            view = param.view(-1)
            theta = view[offset].item()
            h = 1e-5 * (1.0 + abs(theta))
            view[offset] = theta + h
            plus = objective().item()
            view[offset] = theta - h
            minus = objective().item()
            view[offset] = theta
            fd = (plus - minus) / (2 * h)
            analytic = param.grad.view(-1)[offset].item()
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
            worst = max(worst, rel)
    elapsed = time.time() - start
    _report(7, "gradient check", worst <= 1e-3 and elapsed < 60.0,
            f"worst relative error {worst:.2e} over 50 parameters "
            f"in {elapsed:.1f}s")


def test_08_metrics_oracle():
    perfect = metrics_from_confusion(np.array([[3, 0], [0, 2]]))
    chance = metrics_from_confusion(np.array([[1, 1], [1, 1]]))
    hand = metrics_from_confusion(np.array([[40, 10], [5, 45]]))
    ok = (perfect.overall_accuracy == 1.0 and perfect.kappa == 1.0
          and chance.overall_accuracy == 0.5
          and abs(chance.kappa) <= 1e-12
          and hand.overall_accuracy == 0.85
          and abs(hand.kappa - 0.70) <= 1e-12)
    _report(8, "metrics oracle", ok,
            f"hand case OA {hand.overall_accuracy}, kappa {hand.kappa:.12f}")


def _trend_scene_spec():
    means = random_prototypes(3, 32, seed=12)[0] * 0.4
    stds = np.full((3, 32), 0.2)
    rng = np.random.default_rng(7)
    gain = rng.uniform(0.8, 1.25, size=32)
    gain[rng.permutation(32)[:22]] = 0.05  # most bands uninformative after shift
    offset = rng.uniform(-0.5, 0.5, size=32)
    return SceneSpec(3, 32, 45, 45, means, stds, gain, offset,
                     noise_level=0.4, region_sites=12)


def _trend_config(seed, **overrides):
    base = dict(epochs=10, batch_size=64, stem_out_channels=32, num_blocks=2,
                hidden_channels=16, disc_hidden=32, seed=seed,
                sigmoid_slope=1.5, sigmoid_offset=0.5)
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trend_runs():
    spec = _trend_scene_spec()
    start = time.time()
    runs = []
    for seed in (0, 1, 2):
        src_cube, tgt_cube = synth_domain_pair(spec, seed=100 + seed)
        src = extract_patches(zscore_normalize(src_cube), 11, "source")
        tgt = extract_patches(zscore_normalize(tgt_cube), 11, "target")
        models = {
            "full": train(_trend_config(seed), src, tgt),
            "adv_only": train(_trend_config(seed, adaptive_masks=False),
                              src, tgt),
            "source_only": train(_trend_config(seed, lambda_domain=0.0,
                                               adaptive_masks=False),
                                 src, tgt),
        }
        oas = {name: evaluate(model, tgt).overall_accuracy
               for name, model in models.items()}
        runs.append({"src": src, "tgt": tgt, "models": models, "oas": oas})
    return runs, time.time() - start


def test_09_transfer_trend(trend_runs):
    runs, elapsed = trend_runs
    mean = {name: float(np.mean([r["oas"][name] for r in runs]))
            for name in ("full", "adv_only", "source_only")}
    gain_over_baseline = mean["full"] - mean["source_only"]
    drop_vs_adv = mean["adv_only"] - mean["full"]
    wins = sum(r["oas"]["full"] > r["oas"]["adv_only"] for r in runs)
    ok = (gain_over_baseline >= 0.05 and drop_vs_adv <= 0.01 and wins >= 2
          and elapsed <= 900.0)
    _report(9, "transfer trend", ok,
            f"mean OA full {mean['full']:.3f} / adversarial-only "
            f"{mean['adv_only']:.3f} / source-only {mean['source_only']:.3f}; "
            f"full wins {wins}/3 seeds; {elapsed:.0f}s")


def test_10_variance_reduction(trend_runs):
    runs, _ = trend_runs
    pairs = []
    for run in runs:
        model = run["models"]["full"]
        masked = float(np.mean(pooled_feature_stds(
            model, run["src"], run["tgt"], stage="masked_di")))
        backbone = float(np.mean(pooled_feature_stds(
            model, run["src"], run["tgt"], stage="backbone")))
        pairs.append((masked, backbone))
    ok = all(m <= b for m, b in pairs)
    detail = ", ".join(f"{m:.3f} vs {b:.3f}" for m, b in pairs)
    _report(10, "variance reduction", ok,
            f"masked invariant std vs backbone std per seed: {detail}")


def test_11_determinism_and_persistence(tmp_path):
    from conftest import small_scene_spec
    spec = small_scene_spec(gain=[1.4, 0.7, 1.2, 0.8, 1.1, 0.9, 1.3, 0.6],
                            offset=0.2 * np.ones(8), noise=0.2)
    src_cube, tgt_cube = synth_domain_pair(spec, seed=3)
    src = extract_patches(zscore_normalize(src_cube), 11, "source")
    tgt = extract_patches(zscore_normalize(tgt_cube), 11, "target")
    cfg = TrainConfig(epochs=3, batch_size=64, stem_out_channels=16,
                      num_blocks=1, hidden_channels=8, disc_hidden=16,
                      seed=0, sigmoid_offset=1.0)
    first = train(cfg, src, tgt)
    second = train(cfg, src, tgt)
    identical = first.history == second.history

    path = str(tmp_path / "ckpt")
    save_checkpoint(first, path)
    restored = load_checkpoint(path)
    before = evaluate(first, tgt)
    after = evaluate(restored, tgt)
    preserved = (np.array_equal(before.confusion, after.confusion)
                 and before.overall_accuracy == after.overall_accuracy
                 and before.kappa == after.kappa)
    _report(11, "determinism and persistence", identical and preserved,
            f"histories bit-identical: {identical}; round-trip OA "
            f"{before.overall_accuracy:.3f} == {after.overall_accuracy:.3f}")
