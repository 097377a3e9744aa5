"""Alternating generator/discriminator training with polynomial lr decay.

One iteration = forward every path on one source batch and one target batch,
a single generator update on the weighted total objective (discriminators
frozen), then one update for each of the three discriminators on detached
inputs, then the lr schedule. Ablations are pure weight masks; the step code
never branches on the variant.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from itertools import chain
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .config import Config, config_from_dict, config_to_dict, save_config
from .datagen import SOURCE, TARGET, DatasetLoader, DatasetManifest, load_manifest
from .errors import CheckpointError, DataError, TrainingAbortError
from .losses import (
    LossReport,
    LossWeights,
    clamp_guard,
    frozen,
    lsgan_losses,
    output_space_adv_discriminator_loss,
    output_space_adv_generator_loss,
    perceptual_from_features,
    seg_cross_entropy,
    texture_from_features,
    total_loss,
)
from .metrics import EvalReport, evaluate_model
from .nets import GROUP_NAMES, build_model, default_extractor

CHECKPOINT_VERSION = 1
GEN_OPTIMIZERS = ("enc", "dec", "priv")
DISC_OPTIMIZERS = ("d_seg", "d_img_s", "d_img_t")

ABLATIONS = {
    "source-only": ("seg_s",),
    "segmap-adapt": ("seg_s", "seg_adv"),
    "no-label-transfer": ("seg_s", "seg_adv", "rec", "trans_str", "trans_tex", "trans_adv"),
    "full": ("seg_s", "seg_adv", "rec", "trans_str", "trans_tex", "trans_adv", "seg_s2t"),
}


def poly_lr(base_lr: float, iteration: int, max_iters: int, power: float = 0.9) -> float:
    """base_lr * (1 - iter/max_iters)^power."""
    if max_iters <= 0:
        raise ValueError("max_iters must be positive")
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters) ** power


def ablation_weights(base: LossWeights, name: str) -> LossWeights:
    try:
        keep = ABLATIONS[name]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}, pick from {sorted(ABLATIONS)}") from None
    vals = {k: (v if k in keep else 0.0) for k, v in base.as_dict().items()}
    return LossWeights(**vals)


def parameter_fingerprint(module: nn.Module) -> str:
    """Order-stable hash of all trainable parameter values."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    def __init__(self, cfg: Config, manifest: DatasetManifest | None = None):
        cfg.validate()
        self.cfg = cfg
        if manifest is None:
            root = Path(cfg.data.root)
            if not (root / "manifest.json").exists():
                raise DataError(f"no dataset manifest under {root}; run gen-data first")
            manifest = load_manifest(root)
        self.manifest = manifest
        self.num_classes = manifest.num_classes

        self.model = build_model(
            self.num_classes, width=cfg.model.width, z_dim=cfg.model.z_dim, seed=cfg.run.seed
        )
        self.extractor = default_extractor()

        sizes = dict(
            train_size=(cfg.data.train_h, cfg.data.train_w),
            crop_size=(cfg.data.crop_h, cfg.data.crop_w),
            eval_size=(cfg.data.eval_h, cfg.data.eval_w),
        )
        self.loaders = {
            "src_train": DatasetLoader(manifest, SOURCE, "train", seed=[cfg.run.seed, 1], **sizes),
            "tgt_train": DatasetLoader(manifest, TARGET, "train", seed=[cfg.run.seed, 2], **sizes),
            "tgt_val": DatasetLoader(manifest, TARGET, "val", seed=[cfg.run.seed, 3], **sizes),
        }

        lam = cfg.loss_weights
        base = LossWeights(
            seg_s=lam.seg_s, seg_adv=lam.seg_adv, rec=lam.rec, trans_str=lam.trans_str,
            trans_tex=lam.trans_tex, trans_adv=lam.trans_adv, seg_s2t=lam.seg_s2t,
        )
        self.weights = ablation_weights(base, cfg.run.ablation)

        m, opt = self.model, cfg.optim
        betas = (opt.adam_beta1, opt.adam_beta2)
        self.optimizers = {
            "enc": torch.optim.SGD(
                chain(m.E_c.parameters(), m.T.parameters()),
                lr=opt.enc_lr, momentum=opt.enc_momentum, weight_decay=opt.enc_weight_decay,
            ),
            "dec": torch.optim.Adam(m.D.parameters(), lr=opt.dec_lr, betas=betas),
            "priv": torch.optim.Adam(
                chain(m.E_p_s.parameters(), m.E_p_t.parameters()), lr=opt.aux_lr, betas=betas
            ),
            "d_seg": torch.optim.Adam(m.D_seg.parameters(), lr=opt.aux_lr, betas=betas),
            "d_img_s": torch.optim.Adam(m.D_img_s.parameters(), lr=opt.aux_lr, betas=betas),
            "d_img_t": torch.optim.Adam(m.D_img_t.parameters(), lr=opt.aux_lr, betas=betas),
        }
        self.base_lrs = {
            "enc": opt.enc_lr, "dec": opt.dec_lr, "priv": opt.aux_lr,
            "d_seg": opt.aux_lr, "d_img_s": opt.aux_lr, "d_img_t": opt.aux_lr,
        }
        self.iteration = 0
        self.best_miou = -math.inf
        self._log_fh = None

    # ------------------------------------------------------------------
    # one optimization step
    # ------------------------------------------------------------------

    def train_step(self, x_s: torch.Tensor, y_s: torch.Tensor, x_t: torch.Tensor) -> LossReport:
        m, lam = self.model, self.weights
        m.train()
        size = tuple(x_s.shape[-2:])

        # (1) every data path, both reconstruction and both swap directions
        z_c_s, z_c_t = m.encode_common(x_s), m.encode_common(x_t)
        z_p_s, z_p_t = m.encode_private(x_s, SOURCE), m.encode_private(x_t, TARGET)
        x_s2s = m.decode(z_c_s, z_p_s, SOURCE)
        x_t2t = m.decode(z_c_t, z_p_t, TARGET)
        x_s2t = m.decode(z_c_s, z_p_t, TARGET)
        x_t2s = m.decode(z_c_t, z_p_s, SOURCE)
        scores_s = m.classify(z_c_s, size)
        scores_t = m.classify(z_c_t, size)
        probs_s = torch.softmax(scores_s, dim=1)
        probs_t = torch.softmax(scores_t, dim=1)
        x_lt = x_s2t.detach() if self.cfg.loss_weights.detach_label_transfer else x_s2t
        scores_s2t = m.classify(m.encode_common(x_lt), size)

        terms: dict = {}
        terms["seg_s"] = seg_cross_entropy(scores_s, y_s)
        terms["seg_adv"] = output_space_adv_generator_loss(probs_t, m.D_seg)
        terms["seg_s2t"] = seg_cross_entropy(scores_s2t, y_s)

        # feature stacks are the expensive part; skip them when all three
        # image metrics are masked out (their weighted contribution is zero)
        if lam.rec or lam.trans_str or lam.trans_tex:
            lw = self.cfg.layer_weights
            f = self.extractor
            f_s, f_t = f(x_s), f(x_t)
            f_s2s, f_t2t, f_s2t, f_t2s = f(x_s2s), f(x_t2t), f(x_s2t), f(x_t2s)
            terms["rec"] = perceptual_from_features(f_s2s, f_s, lw.rec) + perceptual_from_features(
                f_t2t, f_t, lw.rec
            )
            terms["trans_str"] = perceptual_from_features(f_s2t, f_s, lw.str) + perceptual_from_features(
                f_t2s, f_t, lw.str
            )
            terms["trans_tex"] = texture_from_features(f_s2t, f_t, lw.tex) + texture_from_features(
                f_t2s, f_s, lw.tex
            )

        real_s = m.D_img_s(x_s)
        real_t = m.D_img_t(x_t)
        with frozen(m.D_img_s):
            gen_s, _ = lsgan_losses(real_s.detach(), m.D_img_s(x_t2s))
        with frozen(m.D_img_t):
            gen_t, _ = lsgan_losses(real_t.detach(), m.D_img_t(x_s2t))
        terms["trans_adv"] = gen_s + gen_t

        report = total_loss(terms, lam)

        # (2) generator update, discriminators held fixed
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)
        active = [lam.as_dict()[k] * v for k, v in terms.items() if lam.as_dict()[k] != 0.0]
        if active:
            gen_total = active[0]
            for piece in active[1:]:
                gen_total = gen_total + piece
            gen_total.backward()
        for name in GEN_OPTIMIZERS:
            self.optimizers[name].step()

        # (3) one step per discriminator, all inputs detached
        d_seg_loss = output_space_adv_discriminator_loss(probs_s, probs_t, m.D_seg)
        _, d_img_s_loss = lsgan_losses(real_s, m.D_img_s(x_t2s.detach()))
        _, d_img_t_loss = lsgan_losses(real_t, m.D_img_t(x_s2t.detach()))
        for name, loss in (
            ("d_seg", d_seg_loss),
            ("d_img_s", d_img_s_loss),
            ("d_img_t", d_img_t_loss),
        ):
            if not bool(torch.isfinite(loss)):
                raise TrainingAbortError(name, float(loss.detach()))
            self.optimizers[name].zero_grad(set_to_none=True)
            loss.backward()
            self.optimizers[name].step()

        # (4) advance the schedule
        self.iteration += 1
        self._apply_schedule()

        out = report.scalar()
        out.terms["d_seg"] = float(d_seg_loss.detach())
        out.terms["d_img_s"] = float(d_img_s_loss.detach())
        out.terms["d_img_t"] = float(d_img_t_loss.detach())
        return out

    def _apply_schedule(self) -> None:
        sched = self.cfg.schedule
        it = min(self.iteration, sched.max_iters)
        for name, opt in self.optimizers.items():
            lr = poly_lr(self.base_lrs[name], it, sched.max_iters, sched.poly_power)
            for group in opt.param_groups:
                group["lr"] = lr

    def current_lrs(self) -> dict[str, float]:
        return {name: opt.param_groups[0]["lr"] for name, opt in self.optimizers.items()}

    # ------------------------------------------------------------------
    # training loop
    # ------------------------------------------------------------------

    def _log(self, record: dict) -> None:
        if self._log_fh is None:
            out_dir = Path(self.cfg.run.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")
        self._log_fh.write(json.dumps(record) + "\n")
        self._log_fh.flush()

    def evaluate(self, upsample_x2: bool = False) -> EvalReport:
        return evaluate_model(
            self.model, self.loaders["tgt_val"], upsample_x2=upsample_x2,
            class_names=self.manifest.classes,
        )

    def fit(self) -> list[dict]:
        """Run to max_iters; returns the eval history (one dict per eval)."""
        cfg = self.cfg
        out_dir = Path(cfg.run.out_dir)
        history: list[dict] = []
        if self.iteration >= cfg.schedule.max_iters:
            return history
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.ini")
        bs = cfg.schedule.batch_size

        def run_eval() -> None:
            rep = self.evaluate()
            record = {
                "iter": self.iteration,
                "eval": {
                    "per_class_iou": rep.per_class,
                    "miou": rep.miou,
                    "pixel_accuracy": rep.pixel_accuracy,
                },
            }
            history.append(record)
            self._log(record)
            self.save(out_dir / "latest.npz")
            if rep.miou > self.best_miou:
                self.best_miou = rep.miou
                self.save(out_dir / "best.npz")

        try:
            while self.iteration < cfg.schedule.max_iters:
                xs, ys = self.loaders["src_train"].next_batch(bs, "train", with_labels=True)
                xt, _ = self.loaders["tgt_train"].next_batch(bs, "train", with_labels=False)
                report = self.train_step(
                    torch.from_numpy(xs), torch.from_numpy(ys), torch.from_numpy(xt)
                )
                self._log(
                    {
                        "iter": self.iteration,
                        "terms": report.terms,
                        "total": report.total,
                        "lambda": self.weights.as_dict(),
                        "lr": self.current_lrs(),
                    }
                )
                if cfg.schedule.eval_every and self.iteration % cfg.schedule.eval_every == 0:
                    run_eval()
            if not history or history[-1]["iter"] != self.iteration:
                run_eval()  # max_iters off the eval grid still gets scored, so best.npz always exists
        except (TrainingAbortError, KeyboardInterrupt):
            self.save(out_dir / "emergency.npz")
            raise
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        self.save(out_dir / "latest.npz")
        return history

    # ------------------------------------------------------------------
    # checkpointing
    # ------------------------------------------------------------------

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays: dict[str, np.ndarray] = {}
        nonfloat: dict[str, str] = {}
        for gname, module in self.model.groups().items():
            for k, v in module.state_dict().items():
                arr = v.detach().cpu().numpy()
                if arr.dtype != np.float32:
                    nonfloat[f"{gname}/{k}"] = str(arr.dtype)
                    arr = arr.astype(np.float32)
                arrays[f"params/{gname}/{k}"] = arr
        for oname, opt in self.optimizers.items():
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    raw = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
                    arrays[f"opt/{oname}/{idx}/{k}"] = raw.astype(np.float32)
        meta = {
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "best_miou": self.best_miou,
            "config": config_to_dict(self.cfg),
            "classes": list(self.manifest.classes),
            "canvas": list(self.manifest.canvas),
            "loaders": {k: v.state() for k, v in self.loaders.items()},
            "nonfloat_keys": nonfloat,
            "clamp_guard": clamp_guard.count,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
        return path

    def restore(self, path: Path | str) -> "Trainer":
        meta, arrays = read_checkpoint(path)
        # stage everything first; only then touch live state
        staged_params: dict[str, dict[str, torch.Tensor]] = {}
        for gname, module in self.model.groups().items():
            sd = module.state_dict()
            staged = {}
            for k, ref in sd.items():
                key = f"params/{gname}/{k}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint missing entry {key!r} for group {gname!r}")
                staged[k] = torch.as_tensor(np.asarray(arrays[key])).to(ref.dtype)
            staged_params[gname] = staged
        staged_opt: dict[str, dict] = {}
        for oname, opt in self.optimizers.items():
            state: dict[int, dict] = {}
            prefix = f"opt/{oname}/"
            for key in arrays:
                if not key.startswith(prefix):
                    continue
                _, _, idx, field = key.split("/", 3)
                entry = state.setdefault(int(idx), {})
                arr = np.asarray(arrays[key])
                entry[field] = torch.as_tensor(arr) if field != "step" else torch.tensor(float(arr))
            staged_opt[oname] = {"state": state, "param_groups": opt.state_dict()["param_groups"]}

        for gname, module in self.model.groups().items():
            module.load_state_dict(staged_params[gname])
        for oname, opt in self.optimizers.items():
            opt.load_state_dict(staged_opt[oname])
        for lname, loader in self.loaders.items():
            loader.set_state(meta["loaders"][lname])
        self.iteration = int(meta["iteration"])
        self.best_miou = float(meta["best_miou"])
        clamp_guard.count = int(meta.get("clamp_guard", 0))
        self._apply_schedule()
        return self


def read_checkpoint(path: Path | str) -> tuple[dict, dict[str, np.ndarray]]:
    """Load and validate a checkpoint archive; returns (meta, arrays)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if "meta" not in arrays:
        raise CheckpointError("checkpoint has no meta entry")
    meta = json.loads(bytes(arrays.pop("meta")).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')!r} != {CHECKPOINT_VERSION}")
    groups_present = {k.split("/", 2)[1] for k in arrays if k.startswith("params/")}
    for g in GROUP_NAMES:
        if g not in groups_present:
            raise CheckpointError(f"checkpoint missing parameter group {g!r}")
    return meta, arrays


def load_model_from_checkpoint(path: Path | str):
    """Rebuild just the model (for eval / translate); returns (model, meta)."""
    meta, arrays = read_checkpoint(path)
    cfg = config_from_dict(meta["config"])
    model = build_model(
        len(meta["classes"]), width=cfg.model.width, z_dim=cfg.model.z_dim, seed=cfg.run.seed
    )
    for gname, module in model.groups().items():
        sd = module.state_dict()
        staged = {}
        for k, ref in sd.items():
            key = f"params/{gname}/{k}"
            if key not in arrays:
                raise CheckpointError(f"checkpoint missing entry {key!r} for group {gname!r}")
            staged[k] = torch.as_tensor(np.asarray(arrays[key])).to(ref.dtype)
        module.load_state_dict(staged)
    model.eval()
    return model, meta


def fit(cfg: Config, manifest: DatasetManifest | None = None) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(cfg, manifest)
    history = trainer.fit()
    return trainer, history
