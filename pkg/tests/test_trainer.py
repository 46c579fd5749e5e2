import math
from dataclasses import replace

import numpy as np
import pytest

from canet import ops
from canet.metrics import Metrics
from canet.model import CANetModel, EncoderConfig, ModelConfig
from canet.netpbm import read_pgm
from canet.synthdata import ChangeDataset, DatasetSpec, build_split
from canet.tensor import Tensor
from canet.trainer import (
    CSV_COLUMNS,
    TrainConfig,
    TrainingDivergedError,
    _batch,
    adapt,
    adapt_variant,
    evaluate,
    evaluate_with_loss,
    online_finetune_baseline,
    predict_maps,
    train,
    write_maps,
)

TINY = ModelConfig(encoder=EncoderConfig((4, 8)), eta=2, icm_width=4)
CFG = TrainConfig(lr=0.05, epochs=2, batch_size=4)


@pytest.fixture(scope="module")
def data():
    a = DatasetSpec("a", seed=1, n_train=8, n_test=4, image_size=(16, 16))
    b = DatasetSpec("b", seed=2, n_train=8, n_test=4, image_size=(16, 16), label_granularity="coarse")
    return build_split(a, "train"), build_split(a, "test"), build_split(b, "train"), build_split(b, "test")


def model(ids=("a",), **kw):
    return CANetModel(replace(TINY, **kw), list(ids))


def checksum(params):
    return b"".join(p.data.tobytes() for p in params)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(scope="most")
    assert TrainConfig().to_dict()["momentum"] == 0.9
    assert (TrainConfig().weight_decay, TrainConfig().batch_size, TrainConfig().epochs) == (1e-4, 8, 30)


def test_run_record_shape(data):
    rec = train(model(), data[0], CFG, eval_sets=[("test", "a", data[1])])
    assert rec.epochs == CFG.epochs
    assert [r["split"] for r in rec.rows] == ["train", "train", "test"]
    text = rec.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(text.splitlines()) == 4
    assert rec.updated_params == rec.total_params


def test_seeded_runs_are_bitwise_identical(data):
    m1, m2 = model(), model()
    r1 = train(m1, data[0], CFG)
    r2 = train(m2, data[0], CFG)
    assert r1.epoch_losses == r2.epoch_losses
    assert r1.to_csv(include_seconds=False) == r2.to_csv(include_seconds=False)
    assert checksum(m1.parameters()) == checksum(m2.parameters())
    r3 = train(model(), data[0], replace(CFG, seed=9))
    assert r3.epoch_losses != r1.epoch_losses


def test_first_batch_loss_near_uniform():
    spec = DatasetSpec("a", seed=4, n_train=8, image_size=(32, 32))
    d = build_split(spec, "train")
    m = CANetModel(dataset_ids=["a"])
    logits, _ = m.forward(Tensor(d.x1[:8]), Tensor(d.x2[:8]), "a", "train")
    loss = float(ops.softmax_cross_entropy(logits, d.label[:8]).data)
    assert abs(loss - math.log(2)) < 0.2


def test_loss_decreases_on_tiny_run(data):
    # the halving property is checked on the desk-scale run in the acceptance suite
    rec = train(model(), data[0], replace(CFG, epochs=8))
    assert rec.epoch_losses[-1] < 0.8 * rec.epoch_losses[0]


def test_adapter_only_keeps_shared_and_history(data):
    m = model()
    train(m, data[0], CFG)
    shared = checksum(m.shared_parameters())
    before = m.forward(data[1].x1, data[1].x2, "a", "eval")[0].data.copy()
    metrics_before = evaluate(m, "a", data[1])
    rec = adapt(m, "b", data[2], CFG)
    assert checksum(m.shared_parameters()) == shared
    assert m.forward(data[1].x1, data[1].x2, "a", "eval")[0].data.tobytes() == before.tobytes()
    assert evaluate(m, "a", data[1]) == metrics_before
    part = m.param_partition("b")
    assert rec.updated_params == part.adapter_count + part.bn_bank_count_per_dataset
    assert all(not p.trainable for p in m.parameters())


def test_adapt_init_modes(data):
    m = model()
    train(m, data[0], CFG)
    adapt(m, "b", data[2], replace(CFG, epochs=0))
    assert checksum(m.adapters["b"].parameters()) == checksum(m.adapters["a"].parameters())
    adapt(m, "c", data[2], replace(CFG, epochs=0), init_from=None)
    assert checksum(m.adapters["c"].parameters()) != checksum(m.adapters["a"].parameters())
    with pytest.raises(ValueError, match="already"):
        adapt(m, "b", data[2], CFG)


def test_online_finetune_updates_everything(data):
    m = model()
    train(m, data[0], CFG)
    shared = checksum(m.shared_parameters())
    rec = online_finetune_baseline(m, data[2], CFG)
    assert rec.updated_params == rec.total_params == m.param_partition("a").total
    assert checksum(m.shared_parameters()) != shared
    assert m.dataset_ids == ["a"]


def test_non_finite_loss_aborts(data):
    bad = ChangeDataset("a", data[0].x1.copy(), data[0].x2, data[0].label)
    bad.x1[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="non-finite loss"):
        train(model(), bad, replace(CFG, augment_hflip=False))


def test_empty_dataset_rejected(data):
    empty = data[0].subset(np.arange(0))
    with pytest.raises(ValueError, match="empty"):
        train(model(), empty, CFG)
    with pytest.raises(ValueError, match="empty"):
        evaluate(model(), "a", empty)


def test_joint_flip_moves_inputs_and_label_together(data):
    flip = np.array([True, False])
    x1, x2, y = _batch(data[0], np.array([0, 1]), flip)
    assert np.array_equal(x1[0], data[0].x1[0][..., ::-1])
    assert np.array_equal(x2[0], data[0].x2[0][..., ::-1])
    assert np.array_equal(y[0], data[0].label[0][..., ::-1])
    assert np.array_equal(x1[1], data[0].x1[1]) and np.array_equal(y[1], data[0].label[1])


def test_joint_flip_keeps_loss_of_pointwise_model(data):
    rng = np.random.default_rng(0)
    w = Tensor(rng.standard_normal((2, 6, 1, 1)))

    def loss(x1, x2, y):
        logits = ops.conv2d(ops.concat_channels([Tensor(x1), Tensor(x2)]), w)
        return float(ops.softmax_cross_entropy(logits, y).data)

    idx = np.arange(4)
    plain = loss(*_batch(data[0], idx))
    flipped = loss(*_batch(data[0], idx, np.ones(4, bool)))
    assert abs(plain - flipped) < 1e-6


def test_evaluate_matches_predictions(data):
    m = model()
    train(m, data[0], CFG)
    pred = predict_maps(m, "a", data[1])
    assert evaluate(m, "a", data[1]) == Metrics.from_maps(pred, data[1].label)
    loss, metrics = evaluate_with_loss(m, "a", data[1])
    assert metrics == evaluate(m, "a", data[1]) and loss > 0


def test_write_maps(tmp_path):
    maps = np.zeros((2, 4, 4), np.uint8)
    maps[1, 1, 1] = 1
    paths = write_maps(maps, tmp_path / "maps")
    assert len(paths) == 2
    back = read_pgm(paths[1])
    assert back[1, 1] == 255 and back.sum() == 255


@pytest.mark.parametrize("ablation", ["no_icm", "shared_icm", "shared_bn"])
def test_adapt_variant_keeps_original_intact(data, ablation):
    m = model()
    train(m, data[0], CFG)
    before = checksum(m.parameters())
    v = adapt_variant(m, ablation, "b", data[2], CFG, hist_data=data[0])
    assert v.ablation == ablation and v.dataset_ids == ["a", "b"]
    assert checksum(m.parameters()) == before and m.ablation == "none"
    if ablation == "shared_bn":
        for bank in v._shared_banks():
            assert bank.entry("a") is bank.entry("b")
