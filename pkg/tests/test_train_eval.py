import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from afford3d import autodiff as ad
from afford3d.autodiff import NumericalError
from afford3d.data import synth_generate
from afford3d.layers import ConfigError
from afford3d.model import Model, ModelConfig
from afford3d.traineval.evaluate import PENALTY, EvalReport, evaluate
from afford3d.traineval.losses import LossWeights
from afford3d.traineval.train import TrainConfig, build_vocab, sample_loss, train

TINY = ModelConfig.tiny()


@pytest.fixture(scope="module")
def samples():
    return synth_generate(0, 6, n_points=64, kind="mixed")


def _fresh(samples, seed=0):
    return Model(ModelConfig.tiny(seed=seed), build_vocab(samples))


# ---------------------------------------------------------------- config

def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.weight_decay, cfg.warmup_ratio) == (2e-4, 0.0, 0.03)
    assert cfg.loss_weights == LossWeights(1, 1, 1) and cfg.freeze_encoder is False
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(warmup_ratio=1.0)
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    back = TrainConfig.from_dict(json.loads(json.dumps(TrainConfig(epochs=3).to_dict())))
    assert back == TrainConfig(epochs=3)


# ---------------------------------------------------------------- training

def test_same_seed_bit_identical_checkpoints(samples, tmp_path):
    cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=2, seed=4)
    train(cfg, samples, tmp_path / "a", model_cfg=TINY)
    train(cfg, samples, tmp_path / "b", model_cfg=TINY)
    assert (tmp_path / "a" / "model.sqaf").read_bytes() == (tmp_path / "b" / "model.sqaf").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "loss_log.csv")))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5, 6]
    assert set(rows[0]) == {"step", "lr", "total", "l_c", "l_b", "l_d"}
    saved = json.loads((tmp_path / "a" / "train_config.json").read_text())
    assert saved["seed"] == 4 and saved["batch_size"] == 2


def test_single_sample_loss_decreases(samples):
    cfg = TrainConfig(learning_rate=1e-3, epochs=50, batch_size=1, seed=0)
    _, hist = train(cfg, samples[:1], model_cfg=TINY)
    losses = [h.total for h in hist]
    assert len(losses) == 50
    ups = sum(b > a for a, b in zip(losses[4:], losses[5:]))
    assert ups <= 3, losses
    assert losses[-1] < losses[0]


def test_lr_follows_schedule(samples):
    cfg = TrainConfig(learning_rate=1e-3, epochs=4, batch_size=3, warmup_ratio=0.25)
    _, hist = train(cfg, samples, model_cfg=TINY)
    assert [h.lr for h in hist][:3] == [5e-4, 1e-3, pytest.approx(1e-3 * 0.5 * (1 + np.cos(np.pi / 6)))]
    assert hist[-1].lr == pytest.approx(0.0, abs=1e-15)


def test_freeze_encoder(samples):
    model = _fresh(samples)
    before = {k: v.data.tobytes() for k, v in model.params.items()}
    coords = samples[0].clouds[samples[0].steps[0].object]
    f0 = model.cloud_features(coords).pyramid.f_dense.data.copy()
    train(TrainConfig(learning_rate=1e-2, epochs=1, batch_size=2, freeze_encoder=True), samples, model=model)
    frozen = model.dense_path_names()
    assert frozen and all(k.startswith(("encoder/", "pyramid/")) for k in frozen)
    assert all(model.params[k].data.tobytes() == before[k] for k in frozen)
    assert any(model.params[k].data.tobytes() != before[k] for k in model.params if k.startswith("fusion/"))
    f1 = model.cloud_features(coords).pyramid.f_dense.data
    assert f0.tobytes() == f1.tobytes()


def test_non_finite_loss_aborts(samples):
    model = _fresh(samples)
    model.params["fusion/decoder/fc2/b"].data[...] = np.nan
    with pytest.raises(NumericalError, match=r"step 1 .*l_c=.*l_b=.*l_d="):
        train(TrainConfig(epochs=1, batch_size=2), samples, model=model)


def test_total_loss_gradient_on_tiny_model(samples):
    model = _fresh(samples, seed=1)
    sample = next(s for s in samples if s.task_kind == "sequential")
    names = sorted(model.trainable())

    def fn(ts):
        saved = {k: model.params[k] for k in names}
        model.params.update(ts)
        try:
            return sample_loss(model, sample, LossWeights())[0]
        finally:
            model.params.update(saved)

    point = {k: model.params[k].data for k in names}
    rep = ad.grad_check(fn, point, tol=1e-4, max_elements=2, rng=np.random.default_rng(0))
    assert rep.passed, str(rep)


def test_finetune_continues_from_checkpoint(samples, tmp_path):
    model, _ = train(TrainConfig(epochs=1, batch_size=3), samples, tmp_path / "a", model_cfg=TINY)
    loaded = Model.load(tmp_path / "a")
    model2, _ = train(TrainConfig(epochs=1, batch_size=3, learning_rate=1e-3), samples, model=loaded)
    assert model2 is loaded


# ---------------------------------------------------------------- model persistence

def test_model_save_load(samples, tmp_path):
    model = _fresh(samples)
    model.save(tmp_path / "m")
    loaded = Model.load(tmp_path / "m" / "model.sqaf")
    assert loaded.vocab == model.vocab and loaded.cfg == model.cfg
    s = samples[0]
    _, a = model.predict(s.clouds, s.instruction)
    _, b = loaded.predict(s.clouds, s.instruction)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-4)     # weights are stored as float32


def test_model_load_rejects_mismatch(samples, tmp_path):
    _fresh(samples).save(tmp_path / "m")
    cfg = json.loads((tmp_path / "m" / "model_config.json").read_text())
    cfg["fused_width"] = 12
    (tmp_path / "m" / "model_config.json").write_text(json.dumps(cfg))
    with pytest.raises(ConfigError):
        Model.load(tmp_path / "m")


def test_forward_binds_slots_to_clouds(samples):
    model = _fresh(samples)
    s = next(x for x in samples if len(x.clouds) == 2)
    out = model.forward(s.clouds, s.instruction, slot_objects=[st.object for st in s.steps])
    assert out.slot_objects == [st.object for st in s.steps]
    for m, st in zip(out.masks, s.steps):
        assert m.shape == (len(s.clouds[st.object]),)


# ---------------------------------------------------------------- evaluation

class Oracle:
    """Stands in for a model whose decoder reproduces ground truth."""

    def __init__(self, samples, drop_last=False):
        self.by_instr = {id(s.instruction): s for s in samples}
        self.drop_last = drop_last

    def predict(self, clouds, instr):
        steps = self.by_instr[id(instr)].steps
        masks = [np.asarray(st.mask, dtype=float) for st in steps]
        return None, masks[:-1] if self.drop_last and len(masks) > 1 else masks


def _binary(samples):
    out = []
    for s in samples:
        steps = [replace(st, mask=(st.mask > 0).astype(float)) for st in s.steps]
        out.append(replace(s, steps=steps))
    return out


def test_perfect_model_scores(samples):
    # mIoU binarises ground truth; soft targets could not reach 1 even when copied exactly
    samples = _binary(samples)
    rep = evaluate(Oracle(samples), samples)
    assert rep.aggregate["miou"] == 1.0 and rep.aggregate["mae"] == 0.0
    assert rep.routing_accuracy == 1.0


def test_aggregate_equals_mean_of_samples(samples):
    model = _fresh(samples)
    rep = evaluate(model, samples)
    for name in ("miou", "auc", "sim", "mae"):
        vals = [r[name] for r in rep.per_sample if r[name] is not None]
        assert abs(rep.aggregate[name] - np.mean(vals)) < 1e-9
    assert rep.protocol["miou_rule"] == "pred >= t"
    assert set(rep.per_task_kind) <= {"single", "sequential"}


def test_missing_slots_are_penalised(samples):
    rep = evaluate(Oracle(samples, drop_last=True), samples)
    seq = [r for r in rep.per_sample if r["s_gt"] > 1]
    assert seq
    for r in seq:
        last = r["slots"][-1]
        assert last["penalized"] and all(last[k] == v for k, v in PENALTY.items())
    assert rep.skipped["slot: missing prediction (penalised)"] == len(seq)
    assert rep.routing_accuracy == pytest.approx(1 - len(seq) / len(samples))


def test_eval_report_round_trip(samples, tmp_path):
    rep = evaluate(_fresh(samples), samples)
    rep.save(tmp_path / "r.json")
    assert EvalReport.load(tmp_path / "r.json").to_dict() == json.loads(json.dumps(rep.to_dict()))


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(None, [])


def test_report_rendering(samples, tmp_path):
    from afford3d.traineval.report import render_report
    rep = evaluate(_fresh(samples), samples)
    out = render_report(rep, tmp_path / "fig" / "metrics.png")
    assert out["plot"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = list(csv.DictReader(open(out["slots"])))
    assert len(rows) == sum(len(s.steps) for s in samples)
    summary = list(csv.reader(open(out["summary"])))
    assert summary[0] == ["group", "name", "miou", "auc", "sim", "mae"]
