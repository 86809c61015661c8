"""Command-line front end: one pipeline stage per subcommand.

Exit codes: 0 ok, 2 configuration error, 3 privacy budget infeasible,
4 data error, 5 internal invariant breach.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import accountant, checkpoint, pipeline, synth
from .armodel import ModelConfig, ModelParams
from .config import PipelineConfig, format_value, load_config
from .data import AccessAudit, PrivateDataset, load_public, read_manifest, write_dataset
from .errors import (
    CalibrationError,
    ConfigurationError,
    DataError,
    DPWaveletError,
    InvariantError,
    PrivacyBudgetError,
)
from .imageio import atomic_write_bytes, read_image, write_image
from .tokenizer import CodebookSet, TokenSequence

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4, 5


# --------------------------------------------------------------------------
# persistence helpers


def _params_section(params: ModelParams):
    meta = {"model_config": asdict(params.config), "digest": params.config.digest()}
    return meta, {"theta": params.theta}


def _params_from(section) -> ModelParams:
    meta, arrays = section
    return ModelParams(ModelConfig(**meta["model_config"]), np.asarray(arrays["theta"], dtype=np.float64))


def save_checkpoint(path, cb: CodebookSet, params: ModelParams, cfg: PipelineConfig, manifest: dict) -> None:
    checkpoint.save(
        path,
        {
            "codebooks": (cb.meta(), cb.to_arrays()),
            "params": _params_section(params),
            "config": ({"text": cfg.to_text()}, {}),
            "manifest": (manifest, {}),
        },
    )


def load_checkpoint(path):
    """Returns ``(codebooks, params, config text, manifest dict)``."""
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {path}")
    sec = checkpoint.load(p)
    missing = [s for s in checkpoint.SECTIONS if s not in sec]
    if missing:
        raise DataError(f"checkpoint {path} lacks sections {missing}")
    cb = CodebookSet.from_arrays(*sec["codebooks"])
    return cb, _params_from(sec["params"]), sec["config"][0]["text"], sec["manifest"][0]


def _write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


class _JsonlLog:
    def __init__(self, path: Optional[str]):
        self.fh = open(path, "w") if path else None

    def __call__(self, rec) -> None:
        if self.fh is None:
            return
        line = rec.to_json() if hasattr(rec, "to_json") else json.dumps(rec, sort_keys=True)
        self.fh.write(line + "\n")
        self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _echo(cfg: PipelineConfig, out_dir: Path, stage: str) -> None:
    text = cfg.to_text()
    sys.stderr.write(f"# resolved config ({stage})\n" + text)
    atomic_write_bytes(out_dir / f"{stage}_config.txt", text.encode())


def _require(value: str, key: str) -> str:
    if not value:
        raise ConfigurationError(f"{key} is not set (use --set {key}=PATH or a config file)")
    return value


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    style = args.style or ("public" if args.split == "public" else "private")
    images, conds = synth.make_corpus(style, args.classes, args.per_class, args.seed, args.size, args.channels)
    gen = {
        "style": style,
        "classes": args.classes,
        "per_class": args.per_class,
        "seed": args.seed,
        "size": args.size,
        "channels": args.channels,
        "params": synth.style_params(style),
    }
    try:
        manifest = write_dataset(out, args.split, images, conds, gen)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from None
    print(f"split={manifest.split}")
    print(f"items={len(manifest.items)}")
    print(f"content_hash={manifest.content_hash}")
    print(f"manifest={out / 'manifest.json'}")
    return EXIT_OK


def cmd_pretrain(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out.parent, "pretrain")
    images, conds, manifest = load_public(_require(cfg.public_manifest, "public_manifest"), cfg.n_classes)
    _check_images(images, cfg)
    if cfg.private_manifest:
        priv, _ = read_manifest(cfg.private_manifest)
        n = pipeline.public_overlap(manifest.item_hashes, priv.item_hashes)
        if n:
            sys.stderr.write(f"warning: {n} public images also appear in the private set\n")
    log = _JsonlLog(args.log)
    try:
        model = pipeline.pretrain_public(images, conds, cfg, log_fn=log)
    finally:
        log.close()
    info = {
        "stage": "pretrain",
        "public_content_hash": manifest.content_hash,
        "codebook_hash": pipeline.codebook_digest(model.codebooks),
        "params_hash": pipeline.array_digest(model.params.theta),
        "final_loss": model.losses[-1] if model.losses else None,
    }
    save_checkpoint(out, model.codebooks, model.params, cfg, info)
    print(f"checkpoint={out}")
    print(f"final_loss={format_value(info['final_loss'])}")
    return EXIT_OK


def cmd_finetune_dp(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out.parent, "finetune")
    cb, params, _, pre_info = load_checkpoint(args.pretrained)
    audit = AccessAudit()
    private = PrivateDataset.from_manifest(_require(cfg.private_manifest, "private_manifest"), audit)
    if any(not 0 <= c < cfg.n_classes for c in private.conds):
        raise DataError("private condition id out of range")
    public = pipeline.PublicModel(cb, params)
    log = _JsonlLog(args.log)
    try:
        result = pipeline.finetune_private(public, private, cfg, log_fn=log)
    finally:
        log.close()
    if pipeline.codebook_digest(cb) != pre_info.get("codebook_hash", pipeline.codebook_digest(cb)):
        raise InvariantError("codebooks changed between pretraining and finetuning")
    manifest = result.manifest.to_dict()
    manifest["stage"] = "finetune-dp"
    manifest["private_reads"] = dict(audit.counts)
    save_checkpoint(out, cb, result.params, cfg, manifest)
    print(f"checkpoint={out}")
    print(f"epsilon={format_value(result.manifest.epsilon)}")
    print(f"delta={format_value(cfg.delta)}")
    print(f"noise_multiplier={format_value(result.manifest.noise_multiplier)}")
    return EXIT_OK


def cmd_sample(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out, "sample")
    cb, pre, _, _ = load_checkpoint(args.pretrained)
    cb2, tuned, _, run_manifest = load_checkpoint(args.finetuned)
    if pipeline.codebook_digest(cb) != pipeline.codebook_digest(cb2):
        raise ConfigurationError("pretrained and finetuned checkpoints use different codebooks")
    if not pipeline.detail_segments_equal(pre, tuned):
        raise InvariantError("finetuned checkpoint modifies detail-group parameters")
    conds = _conditions(args, cfg)
    gen = pipeline.generate(tuned, pre, cb, conds, cfg.sample_seed, cfg.temperature)
    outputs: List[str] = []
    for i, (img, coarse) in enumerate(zip(gen.images, gen.coarse_images)):
        for tag, im in (("sample", img), ("coarse", coarse)):
            name = f"{tag}_{i:05d}_c{conds[i]}.{'pgm' if im.shape[-1] == 1 else 'ppm'}"
            write_image(out / name, im)
            outputs.append(name)
    blob = b"".join(len(s.to_bytes()).to_bytes(4, "little") + s.to_bytes() for s in gen.transcript)
    atomic_write_bytes(out / "transcript.bin", blob)
    outputs.append("transcript.bin")
    manifest = pipeline.RunManifest.from_dict(
        {k: v for k, v in run_manifest.items() if k in pipeline.RunManifest.__dataclass_fields__}
    )
    manifest.verify()
    manifest.outputs = outputs
    manifest.timestamps["generate"] = time.time()
    _write_json(out / "run_manifest.json", manifest.to_dict())
    _write_json(out / "conditions.json", {"conds": conds, "seed": cfg.sample_seed})
    print(f"samples={len(conds)}")
    print(f"out={out}")
    return EXIT_OK


def _conditions(args, cfg: PipelineConfig) -> List[int]:
    if args.conds:
        conds = [int(c) for c in args.conds.split(",") if c.strip()]
    elif cfg.eval_manifest:
        m, _ = read_manifest(cfg.eval_manifest)
        conds = [c for _, c in m.items]
    else:
        conds = [i % cfg.n_classes for i in range(args.n)]
    if args.n and not args.conds and cfg.eval_manifest:
        conds = conds[: args.n]
    if any(not 0 <= c < cfg.n_classes for c in conds):
        raise ConfigurationError("condition id out of range")
    return conds


def cmd_eval(args, cfg: PipelineConfig) -> int:
    from . import plotting

    samples = Path(args.samples)
    out = Path(args.out or samples)
    out.mkdir(parents=True, exist_ok=True)
    real, real_conds, _ = load_public(_require(cfg.eval_manifest, "eval_manifest"), cfg.n_classes)
    sample_files = sorted(samples.glob("sample_*.p?m"))
    coarse_files = sorted(samples.glob("coarse_*.p?m"))
    if not sample_files:
        raise DataError(f"no samples found in {samples}")
    gen = [read_image(p) for p in sample_files]
    coarse = [read_image(p) for p in coarse_files] if len(coarse_files) == len(gen) else None
    n = min(len(real), len(gen))
    model = cb = None
    if args.finetuned:
        cb, model, _, _ = load_checkpoint(args.finetuned)
    report = pipeline.evaluate(
        real[:n], gen[:n], cfg.depth, coarse[:n] if coarse else None, model, cb, real_conds[:n]
    )
    report["non_private_diagnostic"] = True
    _write_json(out / "report.json", report)
    table = "".join(f"{k:<24}{format_value(v) if not isinstance(v, bool) else v}\n" for k, v in report.items())
    atomic_write_bytes(out / "report.txt", table.encode())
    rows = {"real": real[:n], "sample": gen[:n]}
    if coarse:
        rows["coarse"] = coarse[:n]
    plotting.sample_grid(out / "samples.png", rows)
    plotting.energy_plot(out / "energy.png", {"real": real[:n], "generated": gen[:n]}, cfg.depth)
    plotting.metrics_plot(out / "metrics.png", {k: v for k, v in report.items() if not isinstance(v, bool)})
    sys.stdout.write(table)
    return EXIT_OK


def cmd_account(args, cfg: PipelineConfig) -> int:
    n = args.dataset_size
    if n is None:
        m, _ = read_manifest(_require(cfg.private_manifest, "private_manifest"))
        n = len(m.items)
    if n < 1:
        raise ConfigurationError("dataset size must be >= 1")
    q = min(1.0, cfg.batch_size / n)
    T = cfg.steps
    print(f"sampling_rate={format_value(q)}")
    print(f"steps={T}")
    print(f"delta={format_value(cfg.delta)}")
    print(f"accountant={accountant.ACCOUNTANT_VERSION}")
    if cfg.noise_multiplier is not None:
        sigma = float(cfg.noise_multiplier)
        eps = math.inf if sigma == 0 else accountant.epsilon_for(sigma, q, T, cfg.delta)
        print(f"noise_multiplier={format_value(sigma)}")
        print(f"epsilon={format_value(eps)}")
        return EXIT_OK
    spec = accountant.PrivacySpec(cfg.epsilon, cfg.delta)
    try:
        sigma = accountant.calibrate_sigma(spec, q, T)
    except CalibrationError as exc:
        print(f"epsilon_floor={format_value(exc.epsilon_floor)}")
        raise PrivacyBudgetError(str(exc)) from None
    eps = math.inf if sigma == 0 else accountant.epsilon_for(sigma, q, T, cfg.delta)
    print(f"noise_multiplier={format_value(sigma)}")
    print(f"epsilon={format_value(eps)}")
    return EXIT_OK


def _check_images(images, cfg: PipelineConfig) -> None:
    want = (cfg.image_size, cfg.image_size, cfg.channels)
    for im in images:
        if im.shape != want:
            raise DataError(f"image shape {im.shape} does not match config {want}")


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpwavelet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def staged(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return sp

    s = sub.add_parser("synth-data", help="write a synthetic corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="public")
    s.add_argument("--style", choices=sorted(synth.STYLES))
    s.add_argument("--classes", type=int, default=8)
    s.add_argument("--per-class", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--channels", type=int, default=1, choices=(1, 3))

    s = staged("pretrain", "fit codebooks and pretrain on the public corpus")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="JSONL training log")

    s = staged("finetune-dp", "stage 1: DP finetuning on private coarse tokens")
    s.add_argument("--pretrained", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="JSONL training log")

    s = staged("sample", "stage 2: sample coarse tokens, complete and decode")
    s.add_argument("--pretrained", required=True)
    s.add_argument("--finetuned", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=0, help="number of samples")
    s.add_argument("--conds", default="", help="comma-separated condition ids")

    s = staged("eval", "non-private diagnostics against the eval set")
    s.add_argument("--samples", required=True, help="directory written by sample")
    s.add_argument("--finetuned", help="checkpoint for teacher-forced token accuracy")
    s.add_argument("--out", help="report directory (default: samples dir)")

    s = staged("account", "report epsilon for a noise multiplier, or calibrate one")
    s.add_argument("--dataset-size", type=int)
    return p


def _overrides(pairs: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth-data":
            return cmd_synth_data(args)
        cfg = load_config(args.config, _overrides(args.set))
        handler = {
            "pretrain": cmd_pretrain,
            "finetune-dp": cmd_finetune_dp,
            "sample": cmd_sample,
            "eval": cmd_eval,
            "account": cmd_account,
        }[args.command]
        return handler(args, cfg)
    except ConfigurationError as exc:
        return _fail(exc, EXIT_CONFIG)
    except PrivacyBudgetError as exc:
        return _fail(exc, EXIT_BUDGET)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except InvariantError as exc:
        return _fail(exc, EXIT_INVARIANT)
    except DPWaveletError as exc:
        return _fail(exc, EXIT_DATA)


def _fail(exc: Exception, code: int) -> int:
    sys.stderr.write(f"error: {exc}\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
