import struct

import numpy as np
import pytest
import torch

from unsam import DomainRegistry
from unsam.data import Dataset, DomainSpec, make_registry
from unsam.errors import (ConfigError, IncompatibleCheckpointError, IntegrityError, ShapeError,
                          TrainingError, ValidationError)
from unsam.pipeline import (CHECKPOINT_MAGIC, LOG_COLUMNS, audit_update_set, evaluate, init_state,
                            load_checkpoint, make_optimizer, predict, predict_batch, save_checkpoint,
                            to_batch, train_all, train_domain, train_step)

SPECS = [DomainSpec("a", count_range=(1, 2), radius_range=(3, 5)),
         DomainSpec("b", count_range=(1, 3), radius_range=(3, 4), fg_color=(0.6, 0.4, 0.1)),
         DomainSpec("c", count_range=(1, 2), radius_range=(4, 5), bg_color=(0.7, 0.8, 0.9))]


@pytest.fixture
def data3():
    return make_registry(SPECS, n_images=4, size=32, seed=0)


@pytest.fixture
def data2():
    return make_registry(SPECS[:2], n_images=4, size=32, seed=0)


def _snapshot(model):
    return {n: t.detach().clone() for n, t in model.state_dict().items()}


def test_train_step_freeze_and_isolation(tiny_cfg, data3):
    reg, ds = data3
    state = init_state(tiny_cfg, reg)
    before = _snapshot(state.model)
    for _ in range(3):
        report = train_step(list(ds[1].train)[:2], 1, state)
    after = state.model.state_dict()
    for name in state.model.frozen_parameters():
        assert torch.equal(before[name], after[name]), name
    for j in (0, 2):
        assert torch.equal(before[f"encoder.bypass.w_spec.{j}"], after[f"encoder.bypass.w_spec.{j}"])
        assert torch.equal(before[f"decoder.queries.{j}"], after[f"decoder.queries.{j}"])
    assert not torch.equal(before["decoder.queries.1"], after["decoder.queries.1"])
    assert report.total == pytest.approx(report.seg + report.spgen)
    assert report.seg == pytest.approx(0.8 * report.focal + 0.2 * report.dice, rel=1e-5)


def test_loss_decreases_on_fixed_batch(tiny_cfg, data2):
    reg, ds = data2
    state = init_state(tiny_cfg.replace(lr=1e-3), reg)
    batch = to_batch(list(ds[0].train))
    losses = [train_step(batch, 0, state).total for _ in range(50)]
    assert losses[-1] < 0.8 * losses[0]


def test_nan_loss_raises_with_diagnostics(tiny_cfg, data2):
    reg, ds = data2
    state = init_state(tiny_cfg, reg)
    images, masks = to_batch(list(ds[0].train)[:2])
    images[0, 0, 0, 0] = float("nan")
    with pytest.raises(TrainingError) as info:
        train_step((images, masks), 0, state)
    assert info.value.diagnostics["domain"] == 0
    assert "param_norms" in info.value.diagnostics


def test_batch_domain_must_match(tiny_cfg, data2):
    reg, ds = data2
    state = init_state(tiny_cfg, reg)
    with pytest.raises(ValidationError):
        train_step(list(ds[0].train)[:2], 1, state)


def test_update_set_audit(tiny_cfg, data2):
    reg, _ = data2
    state = init_state(tiny_cfg, reg)
    make_optimizer(state, 0)
    frozen = {id(p) for p in state.model.frozen_parameters().values()}
    assert not frozen & {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    state.optimizer.add_param_group({"params": [next(iter(state.model.frozen_parameters().values()))]})
    with pytest.raises(TrainingError):
        audit_update_set(state)


def test_lr_schedule_and_cursor(tiny_cfg, data2):
    reg, ds = data2
    state = init_state(tiny_cfg, reg)
    train_domain(0, ds[0].train, state, epochs=2)
    assert state.epoch == 2
    assert state.lr == pytest.approx(1e-4 * 0.98 ** 2)
    assert [r["lr"] for r in state.log_rows] == pytest.approx([1e-4, 9.8e-5])
    assert round(state.lr, 12) == 9.604e-5


def test_train_domain_errors(tiny_cfg, data2):
    reg, ds = data2
    state = init_state(tiny_cfg, reg)
    with pytest.raises(ValidationError):
        train_domain(0, Dataset([]), state)
    with pytest.raises(ValidationError):
        train_domain(0, ds[1].train, state)


def test_determinism(tiny_cfg, data2, tmp_path):
    reg, ds = data2
    a = train_all(reg, ds, tiny_cfg, tmp_path / "a.ckpt", tmp_path / "a.csv")
    b = train_all(reg, ds, tiny_cfg, tmp_path / "b.ckpt", tmp_path / "b.csv")
    assert a.log_rows == b.log_rows
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_train_all_inheritance(tiny_cfg, data3, monkeypatch):
    reg, ds = data3
    calls = []
    from unsam.dt_encoder import DTEncoder
    original = DTEncoder.inherit_common
    monkeypatch.setattr(DTEncoder, "inherit_common",
                        lambda self, k: (calls.append(k), original(self, k))[1])
    state = init_state(tiny_cfg, reg)
    init_queries = [q.detach().clone() for q in state.model.decoder.queries]
    train_all(reg, ds, tiny_cfg, state=state)
    assert calls == [0, 1]
    enc = state.model.encoder
    for k in (0, 1):
        assert torch.equal(enc.bypass.common_history[k], state.common_at_entry[k + 1])
    assert all(not torch.equal(a, b) for a, b in zip(init_queries, state.model.decoder.queries))
    assert len(state.log_rows) == reg.K * tiny_cfg.epochs
    assert state.model.trained_domains == [0, 1, 2]


def test_single_domain_has_no_boundary(tiny_cfg, data2):
    reg, ds = make_registry(SPECS[:1], n_images=4, size=32)
    state = train_all(reg, ds, tiny_cfg)
    assert state.model.encoder.bypass.common_history == {}


def test_missing_dataset(tiny_cfg, data2):
    reg, ds = data2
    with pytest.raises(ConfigError):
        train_all(reg, ds[:1], tiny_cfg)


def test_log_columns(tiny_cfg, data2, tmp_path):
    reg, ds = data2
    train_all(reg, ds, tiny_cfg, log_path=tmp_path / "log.csv")
    header, *rows = (tmp_path / "log.csv").read_text().splitlines()
    assert tuple(header.split(",")) == LOG_COLUMNS
    assert len(rows) == reg.K * tiny_cfg.epochs


def _force_logits(model, bias):
    # zero the last layer of the output MLP and put `bias` in its bias: q_out = bias everywhere
    with torch.no_grad():
        last = model.decoder.out_mlps[0][-1]
        last.weight.zero_()
        last.bias.fill_(bias)
        for conv in (model.decoder.upscale.up1, model.decoder.upscale.up2):
            conv.weight.zero_()
            conv.bias.fill_(1.0)


def test_predict_background_and_tie(tiny_cfg, data2):
    reg, ds = data2
    model = init_state(tiny_cfg, reg).model
    image = ds[0][0].image
    _force_logits(model, -1.0)
    p = predict(model, image, 0)
    assert p.instances.max() == 0 and not p.semantic.any()
    _force_logits(model, 0.0)
    p = predict(model, image, 0)
    assert np.all(p.probability == 0.5)
    assert p.semantic.all() and p.instances.max() == 1


def test_predict_zero_shot_and_shapes(tiny_cfg, data2):
    reg, ds = data2
    state = train_all(reg, ds, tiny_cfg)
    image = ds[0][0].image
    for strategy in ("mean", "last"):
        p = predict(state, image, domain_id=7, strategy=strategy)
        assert p.instances.shape == image.shape[1:]
    assert np.array_equal(predict(state, image, 1, "last").logits, predict(state, image, 1).logits)
    with pytest.raises(ShapeError):
        predict(state, np.zeros((3, 30, 32), np.float32), 0)
    batch = predict_batch(state, np.stack([s.image for s in ds[1]]), 1)
    assert len(batch) == len(ds[1])


def test_instances_come_from_connected_components(tiny_cfg, data2):
    reg, ds = data2
    state = train_all(reg, ds, tiny_cfg)
    from unsam.metrics import connected_components
    p = predict(state, ds[0][0].image, 0)
    assert np.array_equal(p.instances, connected_components(p.semantic, 8))


def test_evaluate(tiny_cfg, data2):
    reg, ds = data2
    model = init_state(tiny_cfg, reg).model
    report = evaluate(model, ds[0], 0, gt_as_prediction=True)
    assert len(report) == len(ds[0])
    m = report.mean
    assert all(m[c] == 1.0 for c in ("dice", "miou", "f1", "aji", "pq")) and m["hd"] == 0.0
    assert len(evaluate(model, ds[1], 1)) == len(ds[1])
    with pytest.raises(ValidationError):
        evaluate(model, Dataset([]), 0)


def test_checkpoint_round_trip(tiny_cfg, data2, tmp_path):
    reg, ds = data2
    state = train_all(reg, ds, tiny_cfg)
    path = save_checkpoint(state, tmp_path / "m.ckpt")
    back = load_checkpoint(path, reg)
    for (n, a), (_, b) in zip(state.model.state_dict().items(), back.model.state_dict().items()):
        assert torch.equal(a, b), n
    assert (back.domain, back.epoch, back.steps) == (state.domain, state.epoch, state.steps)
    assert torch.equal(back.generator.get_state(), state.generator.get_state())
    assert back.model.trained_domains == [0, 1]
    assert torch.equal(back.model.encoder.bypass.common_history[0],
                       state.model.encoder.bypass.common_history[0])
    x = np.stack([s.image for s in ds[0]])
    for a, b in zip(predict_batch(state, x, 0), predict_batch(back, x, 0)):
        assert np.array_equal(a.logits, b.logits)
    assert save_checkpoint(back, tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tiny_cfg, data2, tmp_path):
    reg, ds = data2
    state = init_state(tiny_cfg, reg)
    path = save_checkpoint(state, tmp_path / "m.ckpt")
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "h.ckpt").write_bytes(raw[:12])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "h.ckpt")
    flipped = bytearray(raw)
    flipped[-5] ^= 0xFF
    (tmp_path / "f.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "f.ckpt")
    head = len(CHECKPOINT_MAGIC)
    (tmp_path / "v.ckpt").write_bytes(raw[:head] + struct.pack("<I", 99) + raw[head + 4:])
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(tmp_path / "v.ckpt")
    with pytest.raises(IncompatibleCheckpointError):
        load_checkpoint(path, DomainRegistry(("a", "b", "c")))


def test_trainable_set(tiny_cfg, data2):
    reg, _ = data2
    model = init_state(tiny_cfg, reg).model
    names = set(model.trainable_parameters(1))
    assert "encoder.bypass.w_spec.1" in names and "decoder.queries.1" in names
    assert "encoder.bypass.w_spec.0" not in names and "decoder.queries.0" not in names
    assert not names & set(model.frozen_parameters())
    trainable_ids = {id(p) for k in range(2) for p in model.trainable_parameters(k).values()}
    frozen_ids = {id(p) for p in model.frozen_parameters().values()}
    all_ids = {id(p) for p in model.parameters()}
    assert trainable_ids | frozen_ids == all_ids
