"""Release gate: one test per shipped guarantee, frozen seeds throughout.

Every test enforces its stated tolerance directly and prints exactly one
pass/fail line under ``pytest -v``.  The heavy learning checks train real
models; their configurations were tuned once and then frozen, so reruns
see bitwise-identical numbers.
"""

import time

import numpy as np
import pytest

import nactpred.autodiff as ad
from nactpred import aggregator as agg
from nactpred import heads, metrics
from nactpred.data import SynthConfig, generate_synthetic, load_split, split_dataset
from nactpred.encoder import EncoderConfig, build_encoder, encode_slices_batched, without_adapters
from nactpred.heads import LossConfig
from nactpred.model import ModelConfig, ResponseModel
from nactpred.training import TrainConfig, fit

# Small model used by the gradient and invariance checks.  embed_dim 16
# keeps the classifier taper at 16 -> 8 -> 2; an 8-wide embedding would end
# in a width-1 LayerNorm whose output is constant.
TINY_MODEL = ModelConfig(
    encoder=EncoderConfig(image_size=16, patch_size=8, embed_dim=16,
                          n_blocks=2, n_heads=2, lora_rank=2),
    max_slices=4, pool_heads=2, pool_layers=1, proj_dim=4, dropout_rate=0.0)

# Learning-check model: 32x32x8 volumes, 4 patch tokens per slice.
SMALL_MODEL = ModelConfig(
    encoder=EncoderConfig(image_size=32, patch_size=16, embed_dim=32,
                          n_blocks=2, n_heads=4, lora_rank=4),
    max_slices=8, pool_heads=4, pool_layers=1, proj_dim=16, dropout_rate=0.1)


def _cohort(model: ResponseModel, volumes) -> metrics.ScoredCohort:
    return metrics.ScoredCohort(
        ids=[v.patient_id for v in volumes],
        probabilities=np.array([model.predict_proba(v.voxels)[0] for v in volumes]),
        labels=np.array([v.label for v in volumes]))


@pytest.fixture(scope="module")
def compact_fit(tmp_path_factory):
    """One short but complete training run (ramp, mining, early-stop path)."""
    out = tmp_path_factory.mktemp("compact")
    cfg = SynthConfig(n_patients=24, height=16, width=16, slices=4,
                      signal_strength=1.5, seed=9)
    manifest = split_dataset(generate_synthetic(cfg, out), (0.6, 0.2, 0.2), seed=9)
    model_cfg = ModelConfig(
        encoder=EncoderConfig(image_size=16, patch_size=8, embed_dim=16,
                              n_blocks=2, n_heads=2, lora_rank=2),
        max_slices=4, pool_heads=2, pool_layers=1, proj_dim=4, dropout_rate=0.1)
    train_cfg = TrainConfig(learning_rate=1e-3, max_epochs=8, early_stop_patience=8,
                            batch_size=4, weight_decay=0.01, seed=1,
                            loss=LossConfig(margin=1.0, alpha_max=0.3,
                                            ramp_epochs=5, hard_mining_start_epoch=4))
    model = ResponseModel.initialize(model_cfg, 1)
    frozen_before = {name: t.data.copy() for name, t in model.frozen_parameters()}
    result = fit(model, load_split(manifest, out, "train"),
                 load_split(manifest, out, "val"), train_cfg)
    return {"model": model, "result": result, "cfg": train_cfg,
            "frozen_before": frozen_before}


def test_c01_gradient_check_full_pipeline():
    """Finite differences vs backprop through encoder, aggregator, both heads.

    Two complementary central-difference oracles run per seed, both held to
    the 1e-4 relative-error bar:

    * a directional derivative along sign(grad) for every trainable tensor
      (the sign direction keeps the analytic value at the one-norm scale of
      the gradient, so the oracle never sits in float64 rounding noise);
    * the coordinate-wise sweep on one tensor per component, rotating across
      seeds.  A sweep coordinate whose true gradient is below ~1e-6 cannot
      be resolved by central differences on an O(1) objective at 64-bit
      (the difference of the two evaluations is pure rounding), so a tensor
      is only swept in states where its smallest nonzero coordinate clears
      that scale; the directional check still covers it everywhere.

    Attention key biases are asserted to have (near-)zero analytic gradient
    instead: softmax is invariant to a uniform shift of the key logits, so
    their true gradient is identically zero and finite differences on them
    measure nothing but noise.
    """
    started = time.monotonic()
    worst = 0.0
    step = 1e-5
    for seed in range(20):
        rng = np.random.default_rng([31, seed])
        model = ResponseModel.initialize(TINY_MODEL, seed)
        # Adapter up-factors start at zero; nudge them so the low-rank path
        # carries signal and its down-factors receive nonzero gradient.
        for name, t in model.trainable_parameters():
            if ".adapter.up" in name:
                t.assign_(rng.standard_normal(t.data.shape) * 0.05)
        volumes = [rng.random((16, 16, 2)), rng.random((16, 16, 2))]
        same_label = seed % 2

        def objective() -> ad.Tensor:
            outs = [model.forward_volume(v) for v in volumes]
            z = [heads.l2_normalize(heads.proj_head(o.embedding, model.proj_head))
                 for o in outs]
            # margin 2.0 keeps the different-label branch strictly inside its
            # quadratic region, away from the hinge kink, at the FD step size
            combined = heads.multi_loss(outs[0].logits, 0, z[0], z[1],
                                        same_label, alpha=0.3, margin=2.0)
            return combined + heads.cross_entropy(outs[1].logits, 1)

        named = model.trainable_parameters()
        ad.zero_grads([t for _, t in named])
        ad.backward(objective())
        grads = {name: t.grad.copy() for name, t in named}

        for name, _ in named:
            if name.endswith("attn.key.bias"):
                assert float(np.max(np.abs(grads[name]))) <= 1e-12, name

        for name, t in named:
            if name.endswith("attn.key.bias"):
                continue
            direction = np.sign(grads[name])
            direction[direction == 0.0] = 1.0
            direction /= np.sqrt(direction.size)
            analytic = float(np.sum(grads[name] * direction))
            base = t.data.copy()
            with ad.no_grad():
                t.assign_(base + step * direction)
                f_plus = float(objective().data)
                t.assign_(base - step * direction)
                f_minus = float(objective().data)
                t.assign_(base)
            numeric = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)

        groups: dict[str, list[tuple[str, ad.Tensor]]] = {}
        for name, t in named:
            if not name.endswith("attn.key.bias"):
                groups.setdefault(name.split(".", 1)[0], []).append((name, t))
        assert set(groups) == {"encoder", "aggregator", "cls_head", "proj_head"}
        for tensors in groups.values():
            idx = seed
            while True:
                name, t = tensors[idx % len(tensors)]
                mags = np.abs(grads[name])
                nonzero = mags[mags > 0.0]
                if nonzero.size == 0 or float(nonzero.min()) >= 1e-6:
                    break
                idx += 1
                assert idx - seed <= len(tensors), "no sweepable tensor"
            worst = max(worst, ad.finite_diff_check(objective, [t], step=step))

    elapsed = time.monotonic() - started
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"
    assert elapsed < 120.0, f"gradient check took {elapsed:.0f}s"


def test_c02_loss_identities(compact_fit):
    """Closed-form contrastive cases, alpha=0 collapse, and the alpha trace."""
    e = np.zeros((1, 8))
    e[0, 0] = 1.0
    f = np.zeros((1, 8))
    f[0, 1] = 1.0
    unit_x, unit_y, anti_x = ad.Tensor(e), ad.Tensor(f), ad.Tensor(-e)

    # Same label, coincident: pull term is zero.
    assert float(heads.contrastive_margin_loss(unit_x, unit_x, 1, 1.0).data) == 0.0
    # Different label, separation sqrt(2) beyond margin 1: hinge inactive.
    assert float(heads.contrastive_margin_loss(unit_x, unit_y, 0, 1.0).data) == 0.0
    # Different label, coincident: loss equals margin squared exactly.
    assert float(heads.contrastive_margin_loss(unit_x, unit_x, 0, 1.25).data) == 1.25**2
    # Same label, antipodal unit vectors: squared distance is exactly 4.
    assert float(heads.contrastive_margin_loss(unit_x, anti_x, 1, 1.0).data) == 4.0

    # alpha = 0 reduces the combined objective to the cross-entropy bitwise.
    rng = np.random.default_rng(2)
    logits = ad.Tensor(rng.standard_normal((1, 2)))
    z1 = heads.l2_normalize(ad.Tensor(rng.standard_normal((1, 8))))
    z2 = heads.l2_normalize(ad.Tensor(rng.standard_normal((1, 8))))
    combined = heads.multi_loss(logits, 1, z1, z2, 0, alpha=0.0)
    reference = heads.cross_entropy(logits, 1)
    assert np.array_equal(combined.data, reference.data)
    assert len(combined._parents) == len(reference._parents)

    # The alpha column of a real training log matches the schedule, and the
    # schedule matches its closed form, at every epoch.
    cfg = compact_fit["cfg"].loss
    history = compact_fit["result"].history
    assert len(history) == 8
    for record in history:
        epoch = record["epoch"]
        scheduled = heads.alpha_schedule(epoch, cfg)
        assert record["alpha"] == scheduled
        assert scheduled == cfg.alpha_max * min(1.0, epoch / cfg.ramp_epochs)


def test_c03_reference_confusion_metrics():
    """point_metrics reproduces 16 independently hand-rounded values."""
    # Four fixed operating points; expected values derived by hand from the
    # count fractions (e.g. precision 20/32 -> 0.62, f1 40/66 -> 0.61).
    reference = [
        ((20, 12, 8, 14), (0.52, 0.62, 0.59, 0.61)),
        ((31, 15, 5, 3), (0.67, 0.67, 0.91, 0.78)),
        ((15, 3, 17, 19), (0.59, 0.83, 0.44, 0.58)),
        ((21, 5, 15, 13), (0.67, 0.81, 0.62, 0.70)),
    ]
    checked = 0
    for counts, expected in reference:
        pm = metrics.point_metrics(metrics.ConfusionMatrix(*counts))
        assert pm.degenerate == ()
        for got, want in zip((pm.accuracy, pm.precision, pm.recall, pm.f1), expected):
            assert round(got, 2) == want, f"{counts}: {got:.4f} !~ {want}"
            checked += 1
    assert checked == 16


def test_c04_auc_dual_route_agreement():
    """Threshold-sweep AUC vs pairwise count on 1000 tie-heavy cohorts."""
    rng = np.random.default_rng(414)
    worst = 0.0
    for _ in range(1000):
        size = int(rng.integers(2, 201))
        n_pos = int(rng.integers(1, size))
        labels = np.zeros(size, dtype=int)
        labels[rng.permutation(size)[:n_pos]] = 1
        grid = int(rng.integers(2, 13))  # coarse grids force tied scores
        probs = rng.integers(0, grid + 1, size) / grid
        cohort = metrics.ScoredCohort([f"p{i}" for i in range(size)], probs, labels)
        worst = max(worst, abs(metrics.roc_auc(cohort)
                               - metrics.roc_auc_pairwise(cohort)))
    assert worst <= 1e-12, f"route disagreement {worst:.3e}"


def test_c05_delong_self_p_and_mc_variance():
    """p(A, A) is exactly 1; resampled AUC variance matches the estimate."""
    rng = np.random.default_rng(20240814)
    m = n = 50
    neg = np.clip(rng.normal(0.40, 0.16, m), 0.0, 1.0)
    pos = np.clip(rng.normal(0.62, 0.16, n), 0.0, 1.0)
    cohort = metrics.ScoredCohort(
        ids=[f"p{i}" for i in range(m + n)],
        probabilities=np.concatenate([neg, pos]),
        labels=np.array([0] * m + [1] * n))

    self_test = metrics.delong_test(cohort, cohort)
    assert self_test.p_value == 1.0
    assert self_test.z == 0.0

    _, analytic = metrics.delong_variance(cohort)

    def pairwise_auc(p: np.ndarray, q: np.ndarray) -> float:
        diff = q[:, None] - p[None, :]
        return float(np.mean(np.where(diff > 0, 1.0,
                                      np.where(diff == 0, 0.5, 0.0))))

    boot = np.random.default_rng(7)
    aucs = np.empty(100_000)
    for i in range(aucs.size):
        aucs[i] = pairwise_auc(neg[boot.integers(0, m, m)],
                               pos[boot.integers(0, n, n)])
    mc = float(np.var(aucs))
    assert abs(mc - analytic) <= 0.10 * analytic, f"mc {mc:.3e} vs {analytic:.3e}"


def test_c06_bootstrap_contracts():
    """Seeded reproducibility, class-count preservation, degenerate CI."""
    rng = np.random.default_rng(6)
    n_pos, n_neg = 23, 37
    cohort = metrics.ScoredCohort(
        ids=[f"p{i}" for i in range(n_pos + n_neg)],
        probabilities=rng.random(n_pos + n_neg),
        labels=np.array([1] * n_pos + [0] * n_neg))

    calls: list[tuple[int, int]] = []

    def spy(labels: np.ndarray, probs: np.ndarray) -> float:
        calls.append((int(labels.sum()), labels.size))
        return float(np.mean(probs))

    first = metrics.bootstrap_ci(cohort, spy, n_resamples=250, seed=3)
    # Every evaluation, resampled or not, saw the original class counts.
    assert len(calls) == 251
    assert calls.count((n_pos, n_pos + n_neg)) == len(calls)

    second = metrics.bootstrap_ci(cohort, spy, n_resamples=250, seed=3)
    assert first.point_a == second.point_a
    assert first.ci_a == second.ci_a

    constant = metrics.bootstrap_ci(cohort, lambda l, p: 0.7,
                                    n_resamples=250, seed=3)
    assert constant.ci_a == (0.7, 0.7)


def test_c07_aggregator_permutation_invariance():
    """Zero slice table: volume embedding ignores slice order; weights sum to 1."""
    for seed in range(5):
        rng = np.random.default_rng([71, seed])
        model = ResponseModel.initialize(TINY_MODEL, seed)
        for name, t in model.trainable_parameters():
            if ".adapter.up" in name:
                t.assign_(rng.standard_normal(t.data.shape) * 0.05)
        assert np.all(model.aggregator.slice_pos.data == 0.0)
        voxels = rng.random((16, 16, 4))
        with ad.no_grad():
            base = model.forward_volume(voxels)
            assert abs(float(np.sum(base.attention.weights)) - 1.0) <= 1e-9
            for _ in range(4):
                order = rng.permutation(4)
                out = model.forward_volume(voxels[:, :, order])
                assert abs(float(np.sum(out.attention.weights)) - 1.0) <= 1e-9
                drift = float(np.max(np.abs(out.embedding.data - base.embedding.data)))
                assert drift <= 1e-9, f"permutation moved embedding by {drift:.2e}"


def test_c08_adapter_zero_and_frozen_params(compact_fit):
    """Fresh adapters are inert bitwise; training never touches frozen weights."""
    for seed in range(3):
        rng = np.random.default_rng([81, seed])
        encoder = build_encoder(TINY_MODEL.encoder, rng)
        voxels = rng.random((16, 16, 3))
        with ad.no_grad():
            adapted = encode_slices_batched(voxels, encoder, TINY_MODEL.encoder)
            plain = encode_slices_batched(voxels, without_adapters(encoder),
                                          TINY_MODEL.encoder)
        assert np.array_equal(adapted.data, plain.data)

    frozen_before = compact_fit["frozen_before"]
    frozen_after = dict(compact_fit["model"].frozen_parameters())
    assert set(frozen_after) == set(frozen_before)
    for name, before in frozen_before.items():
        assert np.array_equal(frozen_after[name].data, before), name


def test_c09_end_to_end_learning(tmp_path):
    """Planted-signal training: combined loss reaches 0.90 AUC and beats CE."""
    started = time.monotonic()
    data_cfg = SynthConfig(n_patients=280, height=32, width=32, slices=8,
                           signal_strength=2.5, seed=11)
    manifest = split_dataset(generate_synthetic(data_cfg, tmp_path),
                             (0.6, 0.2, 0.2), seed=11)
    train = load_split(manifest, tmp_path, "train")
    val = load_split(manifest, tmp_path, "val")
    test = load_split(manifest, tmp_path, "test")
    assert (len(train), len(val), len(test)) == (168, 56, 56)

    def run_arm(seed: int, alpha_max: float) -> float:
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=30, early_stop_patience=30,
                          batch_size=8, weight_decay=0.01, seed=seed,
                          loss=LossConfig(margin=1.0, alpha_max=alpha_max,
                                          ramp_epochs=8, hard_mining_start_epoch=12))
        model = ResponseModel.initialize(SMALL_MODEL, seed)
        fit(model, train, val, cfg)
        return metrics.roc_auc(_cohort(model, test))

    combined = [run_arm(seed, alpha_max=0.3) for seed in range(5)]
    ce_only = [run_arm(seed, alpha_max=0.0) for seed in range(5)]
    elapsed = time.monotonic() - started

    combined_mean = float(np.mean(combined))
    ce_mean = float(np.mean(ce_only))
    print(f"\ncombined+mining AUC {combined_mean:.4f} {np.round(combined, 4)}")
    print(f"cross-entropy-only AUC {ce_mean:.4f} {np.round(ce_only, 4)}")
    assert combined_mean >= 0.90, f"combined-loss mean AUC {combined_mean:.4f}"
    assert combined_mean >= ce_mean, f"{combined_mean:.4f} < {ce_mean:.4f}"
    assert elapsed < 1800.0, f"learning check took {elapsed:.0f}s"


def test_c10_null_signal_guard(tmp_path):
    """Label-independent volumes must not be learnable: mean AUC near chance."""
    aucs = []
    for seed in range(5):
        out = tmp_path / f"null{seed}"
        data_cfg = SynthConfig(n_patients=80, height=32, width=32, slices=8,
                               signal_strength=0.0, seed=100 + seed)
        manifest = split_dataset(generate_synthetic(data_cfg, out),
                                 (0.6, 0.2, 0.2), seed=100 + seed)
        cfg = TrainConfig(learning_rate=1e-3, max_epochs=12, early_stop_patience=12,
                          batch_size=8, weight_decay=0.01, seed=seed,
                          loss=LossConfig(margin=1.0, alpha_max=0.3,
                                          ramp_epochs=4, hard_mining_start_epoch=6))
        model = ResponseModel.initialize(SMALL_MODEL, seed)
        fit(model, load_split(manifest, out, "train"),
            load_split(manifest, out, "val"), cfg)
        aucs.append(metrics.roc_auc(_cohort(model, load_split(manifest, out, "test"))))
    mean_auc = float(np.mean(aucs))
    print(f"\nnull-signal AUC {mean_auc:.4f} {np.round(aucs, 4)}")
    assert 0.35 <= mean_auc <= 0.65, f"null-signal mean AUC {mean_auc:.4f}"


def test_c11_calibration_partition():
    """Bins partition every cohort; calibrated scores land inside 0.05."""
    rng = np.random.default_rng(1111)
    for _ in range(200):
        size = int(rng.integers(2, 120))
        labels = rng.integers(0, 2, size)
        probs = rng.random(size)
        cohort = metrics.ScoredCohort([f"p{i}" for i in range(size)], probs, labels)
        bins = metrics.reliability_bins(cohort, n_bins=int(rng.integers(2, 13)))
        assert sum(b.count for b in bins) == size

    rng = np.random.default_rng(1112)
    n = 4000
    probs = rng.random(n)
    labels = (rng.random(n) < probs).astype(int)  # scores are exactly calibrated
    cohort = metrics.ScoredCohort([f"p{i}" for i in range(n)], probs, labels)
    bins = metrics.reliability_bins(cohort, n_bins=5)
    assert sum(b.count for b in bins) == n
    populous = [b for b in bins if b.count >= 500]
    assert len(populous) >= 3  # the 0.05 clause must not pass vacuously
    for b in populous:
        gap = abs(b.observed_positive_fraction - b.mean_predicted)
        assert gap < 0.05, f"bin [{b.low:.1f},{b.high:.1f}) gap {gap:.4f}"
