import inspect
import math

import numpy as np
import pytest
from scipy import linalg

from dpwavelet import armodel, dpoptim, pipeline, synth
from dpwavelet.config import PipelineConfig
from dpwavelet.data import AccessAudit, PrivateDataset
from dpwavelet.errors import ConfigurationError, InvariantError, PrivacyBudgetError, StatisticsError
from dpwavelet.metrics import frechet_distance, mean_psnr, spectral_frechet_distance, subband_features
from dpwavelet.tokenizer import coarse_slice, decode
from dpwavelet.wavelet import partial_reconstruct, reconstruct

TOY = PipelineConfig(
    k_approx=16,
    k_detail=8,
    pretrain_steps=80,
    pretrain_batch=32,
    batch_size=16,
    steps=30,
    warmup_steps=5,
    epsilon=math.inf,
    noise_multiplier=0.0,
)


@pytest.fixture(scope="module")
def public():
    imgs, conds = synth.make_corpus("public", 8, 8, seed=1)
    return pipeline.pretrain_public(imgs, conds, TOY)


@pytest.fixture(scope="module")
def private_data():
    return synth.make_corpus("private", 8, 6, seed=2)


def _private(data, audit=None):
    return PrivateDataset.from_arrays(*data, audit=audit)


# ------------------------------------------------------------ pretraining


def test_pretraining_learns(public):
    # toy run measured 1.18 nats against ln(vocab) = 4.16; threshold frozen at 2.0
    v = public.codebooks.vocab_size
    assert np.mean(public.losses[-10:]) < 2.0 < math.log(v)
    assert public.params.config.coarse_len == public.codebooks.layout.coarse_length == 4


def test_pretraining_deterministic(public):
    imgs, conds = synth.make_corpus("public", 8, 8, seed=1)
    again = pipeline.pretrain_public(imgs, conds, TOY)
    assert again.params.theta.tobytes() == public.params.theta.tobytes()


def test_coarse_sampling_from_pretrained_in_range(public):
    lo, hi = public.codebooks.coarse_vocab
    for s in pipeline.sample_coarse(public.params, public.codebooks, [0, 3, 7], seed=1):
        assert len(s.body) == 4 and all(lo <= t < hi for t in s.body)


def test_overlap_count():
    assert pipeline.public_overlap(["a", "b", "c"], ["c", "d"]) == 1
    assert pipeline.public_overlap(["a"], ["d"]) == 0


# ------------------------------------------------------------- finetuning


def test_budget_precheck_happens_before_any_read(public, private_data):
    audit = AccessAudit()
    cfg = TOY.replace(epsilon=1e-3, noise_multiplier=None)
    with pytest.raises(PrivacyBudgetError):
        pipeline.finetune_private(public, _private(private_data, audit), cfg)
    cfg = TOY.replace(epsilon=2.0, noise_multiplier=0.2)
    with pytest.raises(PrivacyBudgetError):
        pipeline.finetune_private(public, _private(private_data, audit), cfg)
    assert sum(audit.counts.values()) == 0


@pytest.fixture(scope="module")
def tuned(public, private_data):
    audit = AccessAudit()
    res = pipeline.finetune_private(public, _private(private_data, audit), TOY)
    return res, audit


def test_nonprivate_finetuning_lowers_private_perplexity(public, tuned, private_data):
    res, _ = tuned
    imgs, conds = private_data
    before = pipeline.coarse_perplexity(public.params, public.codebooks, imgs, conds, TOY.depth)
    after = pipeline.coarse_perplexity(res.params, public.codebooks, imgs, conds, TOY.depth)
    assert after < before


def test_detail_segments_frozen(public, tuned):
    res, _ = tuned
    assert pipeline.detail_segments_equal(public.params, res.params)
    mask = armodel.trainable_mask(public.params.config, "coarse")
    assert np.array_equal(public.params.theta[~mask], res.params.theta[~mask])
    assert not np.array_equal(public.params.theta[mask], res.params.theta[mask])


def test_private_reads_only_in_stage1(tuned, private_data):
    _, audit = tuned
    assert dict(audit.counts) == {"stage1": len(private_data[0])}


def test_manifest_sound(tuned):
    res, _ = tuned
    m = res.manifest
    m.verify()
    assert math.isinf(m.epsilon) and m.noise_multiplier == 0.0
    assert m.sampling_rate == pytest.approx(16 / 48)
    back = pipeline.RunManifest.from_dict(m.to_dict())
    back.verify()
    bad = pipeline.RunManifest.from_dict({**m.to_dict(), "noise_multiplier": 1.0})
    with pytest.raises(InvariantError):
        bad.verify()


def test_dp_manifest_epsilon_recomputes(public, private_data):
    cfg = TOY.replace(epsilon=8.0, noise_multiplier=None, steps=3)
    res = pipeline.finetune_private(public, _private(private_data), cfg)
    assert res.manifest.epsilon <= 8.0
    assert res.manifest.recompute_epsilon() == res.manifest.epsilon


def test_swap_one_private_image_bounds_presum(public, private_data):
    """At every step's parameters, swapping one image moves the pre-noise sum by <= 2C."""
    imgs, conds = private_data
    other, _ = synth.make_corpus("public", 1, 1, seed=99)
    swapped = list(imgs)
    swapped[5] = other[0]
    cfg = TOY.replace(steps=8, clip_norm=0.5)
    cb, base = public.codebooks, public.params
    mask = armodel.trainable_mask(base.config, "coarse")
    alt = [armodel.make_example(s, "coarse", i) for i, s in enumerate(pipeline.tokenize(swapped, conds, cb, cfg.depth))]
    diffs, touched = [], []

    def observer(step, theta, idx, clipped, presum):
        _, G = armodel.per_example_grads(base.with_theta(theta), [alt[i] for i in idx], mask)
        other_sum = dpoptim.tree_sum(dpoptim.clip_rows(G, cfg.clip_norm)[0])
        diffs.append(np.linalg.norm(presum - other_sum))
        touched.append(5 in idx)

    pipeline.finetune_private(public, PrivateDataset.from_arrays(imgs, conds), cfg, observer=observer)
    assert max(diffs) <= 2 * cfg.clip_norm + 1e-9
    assert any(touched)
    assert all(d == 0 for d, t in zip(diffs, touched) if not t)


# ------------------------------------------------------------- generation


def test_generate_has_no_private_argument():
    for fn in (pipeline.generate, pipeline.sample_coarse, pipeline.complete_and_decode):
        names = set(inspect.signature(fn).parameters)
        assert not names & {"private", "dataset", "images", "private_images"}


def test_generation_outputs(public, tuned):
    res, _ = tuned
    conds = [0, 1, 2, 5]
    g1 = pipeline.generate(res.params, public.params, public.codebooks, conds, seed=4)
    g2 = pipeline.generate(res.params, public.params, public.codebooks, conds, seed=4)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(g1.images, g2.images))
    cb = public.codebooks
    for seq, coarse, prefix in zip(g1.sequences, g1.coarse_images, g1.transcript):
        assert coarse_slice(seq).body == prefix.body
        assert np.array_equal(coarse, partial_reconstruct(decode(seq, cb), 0, clamp=True))
    assert all(im.shape == (16, 16, 1) and im.min() >= 0 and im.max() <= 1 for im in g1.images)


def test_layout_mismatch_rejected(public):
    small = armodel.init_params(armodel.ModelConfig(vocab_size=5, max_len=20, coarse_len=4, approx_vocab=2))
    with pytest.raises(ConfigurationError):
        pipeline.generate(small, small, public.codebooks, [0], seed=0)


def test_post_processing_with_fixed_transcript(public, tuned):
    res, _ = tuned
    transcript = pipeline.sample_coarse(res.params, public.codebooks, [1, 4, 6], seed=2)
    outs = []
    for private_seed in (2, 3):
        audit = AccessAudit()
        _private(synth.make_corpus("private", 8, 6, seed=private_seed), audit)
        with audit.stage("stage2"):
            outs.append(pipeline.complete_and_decode(public.params, public.codebooks, transcript, seed=2))
        assert audit.counts["stage2"] == 0
    assert all(a.tobytes() == b.tobytes() for a, b in zip(outs[0].images, outs[1].images))


# ------------------------------------------------------------- evaluation


def _naive_frechet(a, b):
    mu1, mu2 = a.sum(0) / len(a), b.sum(0) / len(b)
    c1 = (a - mu1).T @ (a - mu1) / (len(a) - 1)
    c2 = (b - mu2).T @ (b - mu2) / (len(b) - 1)
    # tr sqrt(c1 c2) via the symmetric form sqrt(c1)^(1/2) c2 sqrt(c1)^(1/2)
    w, V = np.linalg.eigh(c1)
    r = V @ np.diag(np.sqrt(np.clip(w, 0, None))) @ V.T
    ev = np.linalg.eigvalsh(r @ c2 @ r)
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * np.sum(np.sqrt(np.clip(ev, 0, None))))


def test_sfd_matches_naive_formula():
    a, _ = synth.make_corpus("public", 8, 5, seed=0)
    b, _ = synth.make_corpus("private", 8, 5, seed=0)
    fa, fb = subband_features(a, 2), subband_features(b, 2)
    assert spectral_frechet_distance(a, b, 2) == pytest.approx(_naive_frechet(fa, fb), abs=1e-8)


def test_sfd_identity_and_separation():
    a, _ = synth.make_corpus("public", 4, 5, seed=0)
    assert spectral_frechet_distance(a, a, 2) == pytest.approx(0.0, abs=1e-9)
    dark = [np.full((16, 16, 1), v) for v in (0.1, 0.12, 0.14)]
    light = [np.full((16, 16, 1), v) for v in (0.8, 0.82, 0.84)]
    assert spectral_frechet_distance(dark, light, 2) > 0


def test_sfd_needs_two_images():
    with pytest.raises(StatisticsError):
        spectral_frechet_distance([np.zeros((16, 16))], [np.zeros((16, 16))] * 3, 2)


def test_evaluate_report(public, tuned, private_data):
    res, _ = tuned
    imgs, conds = private_data
    g = pipeline.generate(res.params, public.params, public.codebooks, conds[:8], seed=0)
    rep = pipeline.evaluate(imgs[:8], g.images, 2, g.coarse_images, res.params, public.codebooks, conds[:8])
    assert set(rep) == {"n", "sfd", "coarse_psnr", "coarse_token_accuracy"}
    assert rep["sfd"] >= 0 and 0 <= rep["coarse_token_accuracy"] <= 1 and rep["coarse_psnr"] > 0
    with pytest.raises(StatisticsError):
        pipeline.evaluate(imgs[:3], g.images[:2], 2)


def test_mean_psnr_caps_identical_pairs():
    x = np.random.default_rng(0).random((8, 8, 1))
    assert mean_psnr([x], [x]) == 100.0


def test_derived_seeds_are_distinct():
    seeds = {pipeline.derive_seed(0, i, p) for i in range(50) for p in (1, 2)}
    assert len(seeds) == 100
