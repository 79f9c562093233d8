"""Command-line driver: train, eval, ablate, synth, check-grad.

Every run writes a reproducibility bundle under the output directory: the
exact config snapshot (reloadable), a run-info record with seeds and format
versions, and the artifacts of the subcommand. Exit codes: 0 success,
1 runtime failure, 2 bad configuration or arguments, 3 gradient check
beyond tolerance.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

from . import __version__
from .config import (
    ConfigError,
    apply_overrides,
    load_config,
    save_config,
    synth_spec_from,
    train_config_from,
    window_from,
)
from .data_model import DataError, DatasetSplit, make_split
from .gradcheck import check_gradients, tiny_config
from .preprocessing import preprocess_sample
from .synthetic import generate_dataset
from .trainer import (
    CHECKPOINT_VERSION,
    evaluate,
    load_checkpoint,
    restore_model,
    run_ablation,
    train,
)
from .volume_io import load_manifest, save_synthetic_dataset

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_GRADCHECK = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmodseg",
        description="Semi-supervised dual-branch multi-modal 3D segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="dotted config override, e.g. trainer.max_iters=1",
        )
        p.add_argument(
            "--out", type=str, required=out_required, help="output directory for artifacts"
        )

    common(sub.add_parser("train", help="run the semi-supervised training loop"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.add_argument("--manifest", type=str, required=True)
    p_eval.add_argument("--branch", choices=["fused", "a", "b"], default="fused")
    common(p_eval)
    common(sub.add_parser("ablate", help="train the five flag configurations"))
    common(sub.add_parser("synth", help="write a synthetic dataset and manifest"))
    p_grad = sub.add_parser("check-grad", help="finite-difference gradient verification")
    common(p_grad, out_required=False)
    p_grad.add_argument("--tolerance", type=float, default=1e-3)
    p_grad.add_argument("--step", type=float, default=1e-3)
    return parser


def _prepare_out(out_dir, cfg: dict, command: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    info = {
        "command": command,
        "package_version": __version__,
        "checkpoint_format_version": CHECKPOINT_VERSION,
        "seed": cfg["trainer"]["seed"],
        "split_seed": cfg["data"]["split_seed"],
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2))
    return out


def _load_samples(cfg: dict):
    """Samples from the configured manifest, or synthetic ones when absent."""
    manifest = cfg["data"]["manifest"]
    if manifest:
        samples = load_manifest(manifest, num_classes=cfg["network"]["num_classes"])
        pre = cfg["preprocessing"]
        window = window_from(cfg) if pre["normalize"] == "window" else None
        return [
            preprocess_sample(s, normalize=pre["normalize"], window=window,
                              crop=pre["crop_nonzero"])
            for s in samples
        ]
    spec = synth_spec_from(cfg)
    return generate_dataset(cfg["synth"]["count"], cfg["synth"]["base_seed"], spec)


def _build_split(samples, cfg: dict) -> DatasetSplit:
    data = cfg["data"]
    masked = [s for s in samples if s.labeled]
    bare = [s for s in samples if not s.labeled]
    if not masked:
        raise DataError("no labeled samples available for splitting")
    split = make_split(
        masked,
        labeled_fraction=data["labeled_fraction"],
        seed=data["split_seed"],
        val_count=data["val_count"],
        test_count=data["test_count"],
    )
    if bare:
        split = DatasetSplit(
            labeled=split.labeled,
            unlabeled=split.unlabeled + tuple(bare),
            val=split.val,
            test=split.test,
        )
    return split


def _plot_losses(log, val_history, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    iters = [r["iter"] for r in log]
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(iters, [r["total"] for r in log], label="total")
    ax.plot(iters, [r["ce_a"] + r["ce_b"] for r in log], label="cross-entropy (a+b)")
    ax.plot(iters, [r["dice_a"] + r["dice_b"] for r in log], label="dice (a+b)")
    ax.plot(iters, [r["consistency"] for r in log], label="consistency")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "loss_curve.png", dpi=120)
    plt.close(fig)

    if val_history:
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.plot([v["iter"] for v in val_history], [v["dsc_mean"] for v in val_history], marker="o")
        ax.set_xlabel("iteration")
        ax.set_ylabel("validation DSC")
        fig.tight_layout()
        fig.savefig(out / "val_dsc.png", dpi=120)
        plt.close(fig)


def _cmd_train(args, cfg: dict) -> int:
    out = _prepare_out(args.out, cfg, "train")
    tc = train_config_from(cfg)
    samples = _load_samples(cfg)
    split = _build_split(samples, cfg)
    result = train(tc, split, out_dir=out)
    _plot_losses(result.log, result.val_history, out)
    if split.test:
        report = evaluate(result.model, split.test, tc)
        (out / "metrics_test.csv").write_text(report.to_csv())
        print(f"test: {report.summary_line()}")
    print(f"trained {tc.max_iters} iterations; artifacts in {out}")
    return EXIT_OK


def _cmd_eval(args, cfg: dict) -> int:
    out = _prepare_out(args.out, cfg, "eval")
    payload = load_checkpoint(args.checkpoint)
    model, tc = restore_model(payload)
    samples = load_manifest(args.manifest, num_classes=tc.num_classes)
    window = window_from(cfg) if tc.normalize == "window" else None
    samples = [
        preprocess_sample(s, normalize=tc.normalize, window=window, crop=tc.crop_inputs)
        for s in samples
    ]
    report = evaluate(model, samples, tc, branch=args.branch)
    (out / "metrics.csv").write_text(report.to_csv())
    print(report.summary_line())
    return EXIT_OK


def _cmd_ablate(args, cfg: dict) -> int:
    out = _prepare_out(args.out, cfg, "ablate")
    tc = train_config_from(cfg)
    samples = _load_samples(cfg)
    split = _build_split(samples, cfg)
    result = run_ablation(tc, split, out_dir=out)
    print(result.to_text())
    if any(r.error for r in result.rows):
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_synth(args, cfg: dict) -> int:
    out = _prepare_out(args.out, cfg, "synth")
    spec = synth_spec_from(cfg)
    samples = generate_dataset(cfg["synth"]["count"], cfg["synth"]["base_seed"], spec)
    manifest = save_synthetic_dataset(out / "data", samples)
    print(f"wrote {len(samples)} samples; manifest at {manifest}")
    return EXIT_OK


def _cmd_check_grad(args, cfg: dict) -> int:
    overridden = tiny_config(
        num_stages=cfg["network"]["num_stages"],
        base_channels=cfg["network"]["base_channels"],
        num_classes=cfg["network"]["num_classes"],
        mmf_enabled=cfg["network"]["mmf_enabled"],
        mae_enabled=cfg["network"]["mae_enabled"],
        mcml_enabled=cfg["trainer"]["mcml_enabled"],
        patch_shape=tuple(cfg["preprocessing"]["patch_shape"]),
        alpha=cfg["loss"]["alpha"],
        seed=cfg["trainer"]["seed"],
    )
    report = check_gradients(overridden, step=args.step, tolerance=args.tolerance)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = _prepare_out(args.out, cfg, "check-grad")
        (out / "gradcheck.txt").write_text(text)
    return EXIT_OK if report.passed else EXIT_GRADCHECK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "check-grad":
            # the tiny-model defaults back the gradient check unless overridden
            apply_overrides(cfg, [
                "network.num_stages=2", "network.base_channels=4",
                "preprocessing.patch_shape=[8,8,8]",
            ])
        apply_overrides(cfg, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        handler = {
            "train": _cmd_train,
            "eval": _cmd_eval,
            "ablate": _cmd_ablate,
            "synth": _cmd_synth,
            "check-grad": _cmd_check_grad,
        }[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
