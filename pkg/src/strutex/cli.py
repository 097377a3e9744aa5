"""Command-line entry point.

Verbs: gen-data, train, eval, translate, plot. Configuration precedence is
command-line flags > --config file (or $STRUTEX_CONFIG) > built-in defaults;
every config key is addressable as --<section>.<key>.

Exit codes: 0 success, 2 bad configuration or unknown flag, 3 missing or
unreadable checkpoint, 1 anything else (single-line diagnostic on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import Config, apply_overrides, default_config, iter_keys, load_config
from .datagen import (
    SOURCE,
    TARGET,
    GenerationConfig,
    _resize_image,
    load_image_png,
    load_label_png,
    load_manifest,
    save_image_png,
    write_dataset,
)
from .errors import CheckpointError, ConfigurationError, StrutexError
from .metrics import evaluate_model, structure_report, texture_report
from .train import ABLATIONS, Trainer, load_model_from_checkpoint

CONFIG_ENV_VAR = "STRUTEX_CONFIG"


def _add_config_flags(parser: argparse.ArgumentParser) -> list[tuple[str, str]]:
    """Register --section.key flags for every config entry; returns
    (dest, dotted) pairs for reading them back."""
    pairs = []
    for section, key, _ in iter_keys():
        dotted = f"{section}.{key}"
        dest = f"cfg__{section}__{key}"
        parser.add_argument(f"--{dotted}", dest=dest, metavar="VALUE", default=None)
        pairs.append((dest, dotted))
    return pairs


def _build_config(args, pairs) -> Config:
    path = args.config or os.environ.get(CONFIG_ENV_VAR)
    cfg = load_config(path) if path else default_config()
    overrides = {}
    for dest, dotted in pairs:
        value = getattr(args, dest)
        if value is not None:
            overrides[dotted] = value
    cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="strutex",
        description="Structure/texture disentanglement for cross-domain segmentation (toy corpus).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    flag_pairs: dict[str, list] = {}

    p = sub.add_parser("gen-data", help="render the paired two-domain toy dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-val", type=int, default=50)
    p.add_argument("--canvas-h", type=int, default=64)
    p.add_argument("--canvas-w", type=int, default=128)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--ablation", choices=sorted(ABLATIONS), default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    flag_pairs["train"] = _add_config_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest split")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", choices=(SOURCE, TARGET), default=TARGET)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--upsample-x2", action="store_true")
    p.add_argument("--json-out", default=None, help="also write the report as JSON")
    flag_pairs["eval"] = _add_config_flags(p)

    p = sub.add_parser("translate", help="swap structure and texture between two images")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--structure", required=True, help="image providing the layout")
    p.add_argument("--texture", required=True, help="image providing the appearance")
    p.add_argument("--direction", choices=("s2t", "t2s"), default="s2t")
    p.add_argument("--labels", default=None, help="label map of the structure image")
    p.add_argument("--out", required=True, help="output raster path")
    p.add_argument("--grid", default=None, help="optional structure|texture|output strip")
    flag_pairs["translate"] = _add_config_flags(p)

    p = sub.add_parser("plot", help="render loss curves and IoU bars from a training log")
    p.add_argument("--log", required=True, help="train_log.jsonl path")
    p.add_argument("--out-dir", required=True)

    return parser, flag_pairs


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    manifest = write_dataset(
        Path(args.out),
        seed=args.seed,
        config=GenerationConfig(canvas=(args.canvas_h, args.canvas_w), num_classes=args.num_classes),
        n_train=args.n_train,
        n_val=args.n_val,
        overwrite=args.overwrite,
    )
    print(f"wrote {len(manifest.records)} records under {manifest.root}")
    return 0


def _cmd_train(args, pairs) -> int:
    cfg = _build_config(args, pairs)
    if args.ablation is not None:
        cfg.run.ablation = args.ablation
    trainer = Trainer(cfg)
    if args.resume:
        trainer.restore(args.resume)
    history = trainer.fit()
    final = history[-1]["eval"]["miou"] if history else trainer.evaluate().miou
    print(f"finished at iteration {trainer.iteration}; final target-val mIoU {final:.4f}")
    return 0


def _cmd_eval(args, pairs) -> int:
    cfg = _build_config(args, pairs)
    model, meta = load_model_from_checkpoint(args.checkpoint)
    manifest = load_manifest(Path(cfg.data.root))
    from .datagen import DatasetLoader

    loader = DatasetLoader(
        manifest, args.domain, args.split,
        eval_size=(cfg.data.eval_h, cfg.data.eval_w),
    )
    report = evaluate_model(model, loader, upsample_x2=args.upsample_x2)
    print(report.to_table())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json(), encoding="utf-8")
    return 0


def _load_image_tensor(path: str, size) -> torch.Tensor:
    img = _resize_image(load_image_png(Path(path)), size)
    return torch.from_numpy(np.transpose(img, (2, 0, 1))).float()[None]


def _cmd_translate(args, pairs) -> int:
    cfg = _build_config(args, pairs)
    model, meta = load_model_from_checkpoint(args.checkpoint)
    size = (cfg.data.eval_h, cfg.data.eval_w)
    x_struct = _load_image_tensor(args.structure, size)
    x_tex = _load_image_tensor(args.texture, size)
    struct_dom, tex_dom = (SOURCE, TARGET) if args.direction == "s2t" else (TARGET, SOURCE)
    with torch.no_grad():
        z_c = model.encode_common(x_struct)
        z_p = model.encode_private(x_tex, tex_dom)
        out = model.decode(z_c, z_p, tex_dom)
    raster = np.transpose(out[0].numpy(), (1, 2, 0))
    save_image_png(Path(args.out), raster)
    d_to_tex, d_to_struct = texture_report(out, x_struct, x_tex)
    print(f"texture distance to texture-image domain: {d_to_tex:.6f}")
    print(f"texture distance to structure-image domain: {d_to_struct:.6f}")
    if args.labels:
        y = torch.from_numpy(load_label_png(Path(args.labels)))[None]
        if tuple(y.shape[-2:]) != size:
            raise ConfigurationError("label map must match the eval size")
        d_struct, acc = structure_report(out, x_struct, y, model.predict)
        print(f"structure distance to structure image: {d_struct:.6f}")
        print(f"label agreement on translation: {acc:.4f}")
    if args.grid:
        strip = np.concatenate(
            [np.transpose(t[0].numpy(), (1, 2, 0)) for t in (x_struct, x_tex, out)], axis=1
        )
        save_image_png(Path(args.grid), strip)
    return 0


def _cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, evals = [], []
    with open(args.log, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            (evals if "eval" in rec else steps).append(rec)
    if not steps and not evals:
        raise StrutexError(f"log {args.log} holds no records")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if steps:
        names = sorted(steps[0]["terms"])
        fig, ax = plt.subplots(figsize=(8, 5))
        xs = [r["iter"] for r in steps]
        for name in names:
            ax.plot(xs, [r["terms"].get(name, 0.0) for r in steps], label=name, linewidth=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / "loss_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    if evals:
        last = evals[-1]["eval"]
        ious = [0.0 if v is None else v for v in last["per_class_iou"]]
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.bar(range(len(ious)), ious)
        ax.set_xlabel("class")
        ax.set_ylabel("IoU")
        ax.set_title(f"per-class IoU at iteration {evals[-1]['iter']}")
        fig.tight_layout()
        path = out_dir / "iou_bars.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def main(argv=None) -> int:
    parser, flag_pairs = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.verb == "gen-data":
            return _cmd_gen_data(args)
        if args.verb == "train":
            return _cmd_train(args, flag_pairs["train"])
        if args.verb == "eval":
            return _cmd_eval(args, flag_pairs["eval"])
        if args.verb == "translate":
            return _cmd_translate(args, flag_pairs["translate"])
        if args.verb == "plot":
            return _cmd_plot(args)
        parser.error(f"unknown verb {args.verb!r}")
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (StrutexError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
