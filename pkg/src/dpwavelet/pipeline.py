"""Two-stage private generation: DP finetuning on coarse tokens, public completion.

Stage 1 reads private images exactly once, inside :func:`finetune_private`,
and only their coarse tokens reach the optimizer. Stage 2
(:func:`sample_coarse`, :func:`complete_and_decode`) takes no private data
argument at all, so its outputs are post-processing of the finetuned model.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import accountant, armodel, dpoptim
from .armodel import ModelConfig, ModelParams, TrainExample
from .config import PipelineConfig
from .data import AccessAudit, PrivateDataset
from .errors import CalibrationError, ConfigurationError, InvariantError, PrivacyBudgetError, StatisticsError
from .metrics import coarse_image, mean_psnr, spectral_frechet_distance
from .tokenizer import CodebookSet, TokenSequence, coarse_slice, decode, encode, fit_codebooks
from .wavelet import decompose, reconstruct


def derive_seed(run_seed: int, index: int, purpose: int = 0) -> int:
    """Per-item seed from (run seed, item index, purpose)."""
    return int(np.random.SeedSequence([run_seed, index, purpose]).generate_state(1)[0])


def array_digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def codebook_digest(cb: CodebookSet) -> str:
    return array_digest(*(cb.centroids[b] for b in cb.bands))


def model_config_for(cfg: PipelineConfig, cb: CodebookSet) -> ModelConfig:
    layout = cb.layout
    return ModelConfig(
        vocab_size=cb.vocab_size,
        max_len=1 + len(layout),
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_mlp=cfg.d_mlp,
        cond_vocab=cfg.n_classes,
        coarse_len=layout.coarse_length,
        approx_vocab=cb.coarse_vocab[1],
        seed=cfg.model_seed,
    )


def tokenize(images: Sequence[np.ndarray], conds: Sequence[int], cb: CodebookSet, depth: int) -> List[TokenSequence]:
    return [encode(decompose(img, depth), cb, (int(c),)) for img, c in zip(images, conds)]


# --------------------------------------------------------------------------
# public pretraining


@dataclass
class PublicModel:
    codebooks: CodebookSet
    params: ModelParams
    losses: List[float] = field(default_factory=list)


def fit_public_codebooks(images: Sequence[np.ndarray], cfg: PipelineConfig) -> CodebookSet:
    pyramids = [decompose(img, cfg.depth) for img in images]
    return fit_codebooks(
        pyramids,
        K={"approx": cfg.k_approx, "detail": cfg.k_detail},
        patch={"approx": (cfg.approx_patch,) * 2, "detail": (cfg.detail_patch,) * 2},
        seed=cfg.codebook_seed,
    )


def mean_loss(params: ModelParams, examples: Sequence[TrainExample]) -> float:
    return float(np.mean([armodel.forward_loss(params, e)[0] for e in examples]))


def pretrain_public(images: Sequence[np.ndarray], conds: Sequence[int], cfg: PipelineConfig, log_fn=None) -> PublicModel:
    """Fit codebooks, then train the full model with (non-private) Adam on full sequences."""
    cb = fit_public_codebooks(images, cfg)
    mcfg = model_config_for(cfg, cb)
    params = armodel.init_params(mcfg)
    examples = [armodel.make_example(s, "full", i) for i, s in enumerate(tokenize(images, conds, cb, cfg.depth))]
    sched = dpoptim.DpSgdConfig(
        clip_norm=1.0,
        noise_multiplier=0.0,
        sampling_rate=1.0,
        steps=cfg.pretrain_steps,
        learning_rate=cfg.pretrain_lr,
        warmup_steps=min(50, cfg.pretrain_steps // 10),
        schedule="warmup_cosine",
    )
    rng = np.random.default_rng(np.random.SeedSequence([cfg.model_seed, 0xBEEF]))
    theta = params.theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    n = len(examples)
    bs = min(cfg.pretrain_batch, n)
    order = rng.permutation(n)
    pos = 0
    losses = []
    for t in range(cfg.pretrain_steps):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        batch = [examples[i] for i in order[pos : pos + bs]]
        pos += bs
        l, G = armodel.per_example_grads(params.with_theta(theta), batch)
        g = G.mean(0)
        lr = dpoptim.learning_rate_at(sched, t)
        theta -= lr * dpoptim.adam_direction(g, m, v, t + 1, 0.9, 0.999, 1e-8)
        losses.append(float(l.mean()))
        if log_fn is not None:
            log_fn({"step": t, "loss": losses[-1], "lr": lr})
    return PublicModel(cb, params.with_theta(theta), losses)


# --------------------------------------------------------------------------
# stage 1: private coarse finetuning


@dataclass
class RunManifest:
    epsilon: float
    delta: float
    noise_multiplier: float
    clip_norm: float
    sampling_rate: float
    steps: int
    accountant_version: str
    dataset_size: int
    codebook_hash: str
    pretrained_hash: str
    finetuned_hash: str = ""
    target_epsilon: float = math.inf
    private_content_hash: str = ""
    timestamps: Dict[str, float] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    config: Dict[str, object] = field(default_factory=dict)

    def recompute_epsilon(self) -> float:
        if self.noise_multiplier == 0:
            return math.inf
        return accountant.epsilon_for(self.noise_multiplier, self.sampling_rate, self.steps, self.delta)

    def verify(self) -> None:
        eps = self.recompute_epsilon()
        if not (eps == self.epsilon or (math.isinf(eps) and math.isinf(self.epsilon))):
            raise InvariantError(f"manifest epsilon {self.epsilon} != recomputed {eps}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("epsilon", "target_epsilon"):
            if math.isinf(d[k]):
                d[k] = "inf"
        d["config"] = {k: "inf" if isinstance(v, float) and math.isinf(v) else v for k, v in d["config"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = dict(d)
        for k in ("epsilon", "target_epsilon"):
            d[k] = float(d[k])
        return cls(**d)


def dp_config(cfg: PipelineConfig, n_private: int, sigma: float) -> dpoptim.DpSgdConfig:
    q = min(1.0, cfg.batch_size / n_private)
    return dpoptim.DpSgdConfig(
        clip_norm=cfg.clip_norm,
        noise_multiplier=sigma,
        sampling_rate=q,
        steps=cfg.steps,
        learning_rate=cfg.lr,
        optimizer=cfg.optimizer,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        warmup_steps=cfg.warmup_steps,
        schedule=cfg.schedule,
        seed=cfg.dp_seed,
    )


def resolve_noise(cfg: PipelineConfig, n_private: int) -> Tuple[float, float]:
    """Pick sigma and check the budget; returns ``(sigma, epsilon)``.

    Raises :class:`PrivacyBudgetError` when the configured target cannot be met.
    """
    if n_private < 1:
        raise ConfigurationError("private dataset is empty")
    q = min(1.0, cfg.batch_size / n_private)
    spec = accountant.PrivacySpec(cfg.epsilon, cfg.delta)
    spec.validate(n_private)
    if cfg.noise_multiplier is None:
        try:
            sigma = accountant.calibrate_sigma(spec, q, cfg.steps)
        except CalibrationError as exc:
            raise PrivacyBudgetError(str(exc)) from None
    else:
        sigma = float(cfg.noise_multiplier)
    eps = math.inf if sigma == 0 else accountant.epsilon_for(sigma, q, cfg.steps, cfg.delta)
    if eps > cfg.epsilon:
        raise PrivacyBudgetError(
            f"noise_multiplier={sigma} gives epsilon={eps:.4g} > target {cfg.epsilon}"
        )
    return sigma, eps


@dataclass
class FinetuneResult:
    params: ModelParams
    manifest: RunManifest
    log: List[dpoptim.StepRecord]


def finetune_private(
    public: PublicModel,
    private: PrivateDataset,
    cfg: PipelineConfig,
    observer=None,
    log_fn=None,
) -> FinetuneResult:
    """DP-finetune the coarse-token part of the public model on private images."""
    t0 = time.time()
    sigma, eps = resolve_noise(cfg, len(private))
    cb = public.codebooks
    with private.audit.stage("stage1"):
        images = private.load()
    examples = [
        armodel.make_example(s, "coarse", i)
        for i, s in enumerate(tokenize(images, private.conds, cb, cfg.depth))
    ]
    del images
    mcfg = public.params.config
    mask = armodel.trainable_mask(mcfg, "coarse")
    dcfg = dp_config(cfg, len(private), sigma)
    state = dpoptim.OptimizerState.create(dcfg, public.params.theta, mask)
    base = public.params

    def grad_fn(theta, idx):
        return armodel.per_example_grads(base.with_theta(theta), [examples[i] for i in idx], mask)

    t1 = time.time()
    theta = dpoptim.run(state, dcfg.steps, len(examples), grad_fn, observer, log_fn)
    tuned = base.with_theta(theta.copy())
    _check_frozen(public.params, tuned, mask)
    manifest = RunManifest(
        epsilon=eps,
        delta=cfg.delta,
        noise_multiplier=sigma,
        clip_norm=cfg.clip_norm,
        sampling_rate=dcfg.sampling_rate,
        steps=dcfg.steps,
        accountant_version=accountant.ACCOUNTANT_VERSION,
        dataset_size=len(private),
        codebook_hash=codebook_digest(cb),
        pretrained_hash=array_digest(public.params.theta),
        finetuned_hash=array_digest(tuned.theta),
        target_epsilon=cfg.epsilon,
        private_content_hash=private.content_hash,
        timestamps={"accounting": t0, "stage1_start": t1, "stage1_end": time.time()},
        config=cfg.to_dict(),
    )
    manifest.verify()
    return FinetuneResult(tuned, manifest, state.log)


def _check_frozen(before: ModelParams, after: ModelParams, mask: np.ndarray) -> None:
    if not np.array_equal(before.theta[~mask], after.theta[~mask]):
        raise InvariantError("frozen parameters changed during private finetuning")


def detail_segments_equal(a: ModelParams, b: ModelParams) -> bool:
    for name in a.index.names():
        if armodel.is_detail_segment(name) and not np.array_equal(a.segment(name), b.segment(name)):
            return False
    return True


def public_overlap(public_hashes: Sequence[str], private_hashes: Sequence[str]) -> int:
    return len(set(public_hashes) & set(private_hashes))


# --------------------------------------------------------------------------
# stage 2: generation (post-processing only)


@dataclass
class Generation:
    conds: List[int]
    transcript: List[TokenSequence]
    sequences: List[TokenSequence]
    images: List[np.ndarray]
    coarse_images: List[np.ndarray]


def sample_coarse(finetuned: ModelParams, codebooks: CodebookSet, conds: Sequence[int], seed: int, temperature: float = 1.0) -> List[TokenSequence]:
    """Coarse token transcript drawn from the finetuned model."""
    layout = codebooks.layout
    _check_compatible(finetuned, codebooks)
    empty = TokenSequence((), (), layout)
    return [
        armodel.sample(finetuned, (int(c),), empty, layout.coarse_length, temperature, derive_seed(seed, i, 1))
        for i, c in enumerate(conds)
    ]


def complete_and_decode(
    pretrained: ModelParams,
    codebooks: CodebookSet,
    transcript: Sequence[TokenSequence],
    seed: int,
    temperature: float = 1.0,
) -> Generation:
    """Complete each coarse prefix with the frozen public model and decode it."""
    layout = codebooks.layout
    _check_compatible(pretrained, codebooks)
    seqs, images, coarse = [], [], []
    for i, prefix in enumerate(transcript):
        full = armodel.sample(pretrained, prefix.cond, prefix, len(layout), temperature, derive_seed(seed, i, 2))
        seqs.append(full)
        images.append(reconstruct(decode(full, codebooks), clamp=True))
        coarse.append(reconstruct(decode(coarse_slice(full), codebooks), clamp=True))
    return Generation([s.cond[0] for s in transcript], list(transcript), seqs, images, coarse)


def generate(
    finetuned: ModelParams,
    pretrained: ModelParams,
    codebooks: CodebookSet,
    conds: Sequence[int],
    seed: int,
    temperature: float = 1.0,
) -> Generation:
    transcript = sample_coarse(finetuned, codebooks, conds, seed, temperature)
    return complete_and_decode(pretrained, codebooks, transcript, seed, temperature)


def _check_compatible(params: ModelParams, cb: CodebookSet) -> None:
    c = params.config
    if c.vocab_size != cb.vocab_size or c.coarse_len != cb.layout.coarse_length or c.max_len < 1 + len(cb.layout):
        raise ConfigurationError("model configuration does not match the codebook layout")


# --------------------------------------------------------------------------
# evaluation (non-private diagnostics)


def evaluate(
    real: Sequence[np.ndarray],
    generated: Sequence[np.ndarray],
    depth: int,
    generated_coarse: Optional[Sequence[np.ndarray]] = None,
    model: Optional[ModelParams] = None,
    codebooks: Optional[CodebookSet] = None,
    real_conds: Optional[Sequence[int]] = None,
) -> Dict[str, float]:
    """Spectral Frechet distance, paired coarse PSNR and teacher-forced coarse accuracy."""
    if len(real) != len(generated):
        raise StatisticsError(f"set sizes differ: {len(real)} real vs {len(generated)} generated")
    report = {"n": len(real), "sfd": spectral_frechet_distance(real, generated, depth)}
    if generated_coarse is not None:
        report["coarse_psnr"] = mean_psnr([coarse_image(r, depth) for r in real], generated_coarse)
    if model is not None and codebooks is not None and real_conds is not None:
        seqs = tokenize(real, real_conds, codebooks, depth)
        n = codebooks.layout.coarse_length
        accs = [armodel.teacher_forced_accuracy(model, coarse_slice(s), range(n)) for s in seqs]
        report["coarse_token_accuracy"] = float(np.mean(accs))
    return report


def coarse_perplexity(params: ModelParams, codebooks: CodebookSet, images, conds, depth: int) -> float:
    seqs = tokenize(images, conds, codebooks, depth)
    examples = [armodel.make_example(s, "coarse") for s in seqs]
    return float(math.exp(mean_loss(params, examples)))
