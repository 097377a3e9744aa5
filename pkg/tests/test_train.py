import json
import math

import numpy as np
import pytest
import torch

from strutex.config import default_config
from strutex.datagen import SOURCE, write_dataset
from strutex.errors import CheckpointError, DataError, TrainingAbortError
from strutex.losses import LossWeights, output_space_adv_generator_loss, seg_cross_entropy
from strutex.train import (
    ABLATIONS,
    DISC_OPTIMIZERS,
    GEN_OPTIMIZERS,
    Trainer,
    ablation_weights,
    load_model_from_checkpoint,
    parameter_fingerprint,
    poly_lr,
    read_checkpoint,
)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "toy"
    return write_dataset(root, seed=0, n_train=6, n_val=3)


def _config(manifest, tmp_path, **sched):
    cfg = default_config()
    cfg.data.root = str(manifest.root)
    cfg.model.width = 16
    cfg.run.out_dir = str(tmp_path / "run")
    for k, v in sched.items():
        setattr(cfg.schedule, k, v)
    return cfg


def _draw(trainer):
    bs = trainer.cfg.schedule.batch_size
    xs, ys = trainer.loaders["src_train"].next_batch(bs, "train", with_labels=True)
    xt, _ = trainer.loaders["tgt_train"].next_batch(bs, "train", with_labels=False)
    return torch.from_numpy(xs), torch.from_numpy(ys), torch.from_numpy(xt)


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_poly_lr_endpoints_and_midpoint():
    assert poly_lr(0.01, 0, 100, 0.9) == 0.01
    assert poly_lr(0.01, 100, 100, 0.9) == 0.0
    assert abs(poly_lr(1.0, 125000, 250000, 0.9) - 0.53589) <= 1e-5


def test_poly_lr_monotone():
    vals = [poly_lr(1.0, i, 50, 0.9) for i in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_poly_lr_range_errors():
    with pytest.raises(ValueError):
        poly_lr(1.0, 101, 100, 0.9)
    with pytest.raises(ValueError):
        poly_lr(1.0, -1, 100, 0.9)
    with pytest.raises(ValueError):
        poly_lr(1.0, 0, 0, 0.9)


def test_schedule_applied_to_every_group(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path, max_iters=10))
    for _ in range(3):
        tr.train_step(*_draw(tr))
    lrs = tr.current_lrs()
    for name, base in tr.base_lrs.items():
        assert lrs[name] == pytest.approx(poly_lr(base, 3, 10, 0.9), rel=1e-12)
    # ratios between groups stay fixed
    assert lrs["dec"] / lrs["enc"] == pytest.approx(tr.base_lrs["dec"] / tr.base_lrs["enc"])


# ---------------------------------------------------------------------------
# ablation masks
# ---------------------------------------------------------------------------


def test_ablation_masks():
    base = LossWeights()
    support = lambda lam: {k for k, v in lam.as_dict().items() if v != 0}
    assert support(ablation_weights(base, "source-only")) == {"seg_s"}
    assert support(ablation_weights(base, "segmap-adapt")) == {"seg_s", "seg_adv"}
    assert support(ablation_weights(base, "no-label-transfer")) == set(ABLATIONS["full"]) - {"seg_s2t"}
    assert support(ablation_weights(base, "full")) == set(ABLATIONS["full"])
    with pytest.raises(ValueError):
        ablation_weights(base, "everything")


def test_zero_weight_terms_leave_params_untouched(manifest, tmp_path):
    cfg = _config(manifest, tmp_path)
    cfg.run.ablation = "source-only"
    tr = Trainer(cfg)
    before = {g: parameter_fingerprint(m) for g, m in tr.model.groups().items()}
    tr.train_step(*_draw(tr))
    after = {g: parameter_fingerprint(m) for g, m in tr.model.groups().items()}
    for g in ("E_p_s", "E_p_t", "D"):
        assert after[g] == before[g], f"{g} moved despite zero loss weight"
    assert after["E_c"] != before["E_c"]
    assert after["T"] != before["T"]
    # discriminators still take their own step regardless of the mask
    for g in ("D_seg", "D_img_s", "D_img_t"):
        assert after[g] != before[g]


# ---------------------------------------------------------------------------
# update partition
# ---------------------------------------------------------------------------


def test_generator_phase_never_touches_discriminators(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    m = tr.model
    xs, ys, xt = _draw(tr)
    disc_before = {g: parameter_fingerprint(mod) for g, mod in m.discriminator_modules().items()}
    # replicate the generator phase: weighted loss, backward, generator steps
    scores = m.classify(m.encode_common(xs), tuple(xs.shape[-2:]))
    probs_t = torch.softmax(m.classify(m.encode_common(xt), tuple(xt.shape[-2:])), dim=1)
    loss = seg_cross_entropy(scores, ys) + 0.001 * output_space_adv_generator_loss(probs_t, m.D_seg)
    for opt in tr.optimizers.values():
        opt.zero_grad(set_to_none=True)
    loss.backward()
    for name in GEN_OPTIMIZERS:
        tr.optimizers[name].step()
    disc_after = {g: parameter_fingerprint(mod) for g, mod in m.discriminator_modules().items()}
    assert disc_after == disc_before


def test_discriminator_phase_never_touches_generator(manifest, tmp_path):
    cfg = _config(manifest, tmp_path)
    tr = Trainer(cfg)
    tr.weights = LossWeights(0, 0, 0, 0, 0, 0, 0)  # generator phase becomes a no-op
    gen_before = {g: parameter_fingerprint(m) for g, m in tr.model.generator_modules().items()}
    disc_before = {g: parameter_fingerprint(m) for g, m in tr.model.discriminator_modules().items()}
    tr.train_step(*_draw(tr))
    gen_after = {g: parameter_fingerprint(m) for g, m in tr.model.generator_modules().items()}
    disc_after = {g: parameter_fingerprint(m) for g, m in tr.model.discriminator_modules().items()}
    assert gen_after == gen_before
    assert all(disc_after[g] != disc_before[g] for g in disc_before)


# ---------------------------------------------------------------------------
# determinism and learning smoke
# ---------------------------------------------------------------------------


def test_reports_deterministic_over_10_steps(manifest, tmp_path):
    runs = []
    for attempt in range(2):
        tr = Trainer(_config(manifest, tmp_path / str(attempt)))
        reports = []
        for _ in range(10):
            reports.append(tr.train_step(*_draw(tr)))
        runs.append([(r.terms, r.total) for r in reports])
    assert runs[0] == runs[1]


def test_200_step_smoke_decreases_seg_loss(manifest, tmp_path):
    cfg = _config(manifest, tmp_path)
    cfg.run.seed = 1
    tr = Trainer(cfg)
    seg = []
    for _ in range(200):
        seg.append(tr.train_step(*_draw(tr)).terms["seg_s"])
    assert np.mean(seg[-20:]) < np.mean(seg[:20])


# ---------------------------------------------------------------------------
# fit loop
# ---------------------------------------------------------------------------


def test_fit_zero_iters(manifest, tmp_path):
    cfg = _config(manifest, tmp_path, max_iters=0)
    trainer = Trainer(cfg)
    history = trainer.fit()
    assert history == []
    assert not (tmp_path / "run" / "train_log.jsonl").exists()


def test_fit_eval_counting_and_logs(manifest, tmp_path):
    cfg = _config(manifest, tmp_path, max_iters=100, eval_every=50)
    trainer = Trainer(cfg)
    history = trainer.fit()
    assert len(history) == 2
    assert [h["iter"] for h in history] == [50, 100]
    records = [
        json.loads(line)
        for line in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    ]
    steps = [r for r in records if "terms" in r]
    evals = [r for r in records if "eval" in r]
    assert len(steps) == 100 and len(evals) == 2
    assert steps[0]["lambda"]["seg_s"] == 1.0
    assert set(steps[0]["lr"]) == set(GEN_OPTIMIZERS) | set(DISC_OPTIMIZERS)
    assert (tmp_path / "run" / "latest.npz").exists()
    assert (tmp_path / "run" / "best.npz").exists()
    assert (tmp_path / "run" / "config.ini").exists()
    assert math.isfinite(history[-1]["eval"]["miou"])


def test_fit_missing_dataset(tmp_path):
    cfg = default_config()
    cfg.data.root = str(tmp_path / "nowhere")
    with pytest.raises(DataError):
        Trainer(cfg)


# ---------------------------------------------------------------------------
# abort path
# ---------------------------------------------------------------------------


def test_nonfinite_input_aborts_with_term_name(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    xs, ys, xt = _draw(tr)
    xs[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingAbortError) as exc:
        tr.train_step(xs, ys, xt)
    assert exc.value.term in set(ABLATIONS["full"])


def test_fit_writes_emergency_checkpoint_on_abort(manifest, tmp_path, monkeypatch):
    cfg = _config(manifest, tmp_path, max_iters=10)
    trainer = Trainer(cfg)

    def boom(*a, **k):
        raise TrainingAbortError("seg_s", float("nan"))

    monkeypatch.setattr(trainer, "train_step", boom)
    with pytest.raises(TrainingAbortError):
        trainer.fit()
    assert (tmp_path / "run" / "emergency.npz").exists()


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_params_and_eval_outputs(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    for _ in range(2):
        tr.train_step(*_draw(tr))
    path = tr.save(tmp_path / "ck.npz")
    tr.model.eval()
    x = torch.from_numpy(tr.loaders["tgt_val"].load_batch([0], mode="eval")[0])
    with torch.no_grad():
        want = tr.model.predict(x)

    fresh = Trainer(_config(manifest, tmp_path / "b"))
    fresh.restore(path)
    assert fresh.iteration == tr.iteration
    for g, m in tr.model.groups().items():
        assert parameter_fingerprint(m) == parameter_fingerprint(getattr(fresh.model, g))
    fresh.model.eval()
    with torch.no_grad():
        got = fresh.model.predict(x)
    assert torch.equal(want, got)


def test_resume_bit_equivalence_over_5_steps(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    for _ in range(3):
        tr.train_step(*_draw(tr))
    path = tr.save(tmp_path / "ck.npz")
    cont = [tr.train_step(*_draw(tr)) for _ in range(5)]

    resumed = Trainer(_config(manifest, tmp_path / "b"))
    resumed.restore(path)
    redo = [resumed.train_step(*_draw(resumed)) for _ in range(5)]
    assert [(r.terms, r.total) for r in cont] == [(r.terms, r.total) for r in redo]
    for g, m in tr.model.groups().items():
        assert parameter_fingerprint(m) == parameter_fingerprint(getattr(resumed.model, g))


def test_truncated_checkpoint_rejected_without_mutation(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    tr.train_step(*_draw(tr))
    path = tr.save(tmp_path / "ck.npz")
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    victim = Trainer(_config(manifest, tmp_path / "b"))
    before = {g: parameter_fingerprint(m) for g, m in victim.model.groups().items()}
    with pytest.raises(CheckpointError):
        victim.restore(path)
    after = {g: parameter_fingerprint(m) for g, m in victim.model.groups().items()}
    assert after == before


def test_missing_group_named(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    path = tr.save(tmp_path / "ck.npz")
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files if not k.startswith("params/D_seg/")}
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    with pytest.raises(CheckpointError) as exc:
        read_checkpoint(path)
    assert "D_seg" in str(exc.value)


def test_missing_file_and_model_loading(manifest, tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "nope.npz")
    tr = Trainer(_config(manifest, tmp_path))
    path = tr.save(tmp_path / "ck.npz")
    model, meta = load_model_from_checkpoint(path)
    assert meta["classes"] == list(manifest.classes)
    assert not model.training
    for g, m in tr.model.groups().items():
        assert parameter_fingerprint(m) == parameter_fingerprint(getattr(model, g))


def test_checkpoint_arrays_are_float32(manifest, tmp_path):
    tr = Trainer(_config(manifest, tmp_path))
    tr.train_step(*_draw(tr))
    path = tr.save(tmp_path / "ck.npz")
    with np.load(path) as npz:
        for key in npz.files:
            if key == "meta":
                continue
            assert npz[key].dtype == np.float32, key
