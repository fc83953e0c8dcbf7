import numpy as np
import pytest
import torch

from dipct.datasim import make_dataset
from dipct.fbp import FbpFilter
from dipct.nn import NetworkConfig, init_params
from dipct.postproc import TrainConfig, apply_postprocessor, load_postprocessor, train_postprocessor

NET = NetworkConfig(scales=2, channels_per_layer=8, skip_channels=(4, 4), output_size=32, dtype="float32")


@pytest.fixture(scope="module")
def small_ds():
    return make_dataset(8, 3, 2, seed=5, image_size=32, max_ellipses=5)


@pytest.fixture(scope="module")
def trained(small_ds, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("pp") / "net.ckpt"
    cfg = TrainConfig(net=NET, epochs=12, batch_size=2, lr=2e-3, checkpoint=str(ckpt))
    params, log = train_postprocessor(small_ds, cfg)
    return params, log, ckpt


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(net=NetworkConfig(2, 4, (0, 0), input_channels=2, output_size=32))


def test_empty_training_set(small_ds):
    ds = make_dataset(0, 1, 0, image_size=32)
    with pytest.raises(ValueError, match="empty"):
        train_postprocessor(ds, TrainConfig(net=NET, epochs=1))


def test_network_size_must_match(small_ds):
    with pytest.raises(ValueError):
        train_postprocessor(small_ds, TrainConfig(net=NetworkConfig(2, 4, (0, 0), output_size=64), epochs=1))


def test_training_loss_decreases(trained):
    _, log, _ = trained
    assert log.epochs[9].train_mse < log.epochs[0].train_mse


def test_kept_checkpoint_is_best_on_validation(trained):
    params, log, _ = trained
    vals = [e.val_mse for e in log.epochs]
    assert log.best_val_mse == min(vals) <= vals[-1]
    assert log.epochs[log.best_epoch - 1].val_mse == log.best_val_mse


def test_checkpoint_reproduces_outputs(trained, small_ds):
    params, _, ckpt = trained
    loaded, filt = load_postprocessor(ckpt)
    y = small_ds.test[0].observation
    assert np.array_equal(apply_postprocessor(params, y, small_ds.geometry), apply_postprocessor(loaded, y, small_ds.geometry, filt))


def test_zero_parameters_give_half(small_ds):
    params = init_params(NET, 0)
    with torch.no_grad():
        for p in params:
            p.zero_()
    out = apply_postprocessor(params, small_ds.test[0].observation, small_ds.geometry)
    assert np.all(out == 0.5)


def test_apply_is_deterministic_and_bounded(trained, small_ds):
    params, _, _ = trained
    y = small_ds.test[1].observation
    a = apply_postprocessor(params, y, small_ds.geometry, FbpFilter("hann", 0.6))
    b = apply_postprocessor(params, y, small_ds.geometry, FbpFilter("hann", 0.6))
    assert np.array_equal(a, b)
    assert a.min() > 0 and a.max() < 1


def test_apply_shape_mismatch(trained):
    params, _, _ = trained
    g = make_dataset(0, 0, 1, image_size=64).geometry
    with pytest.raises(ValueError):
        apply_postprocessor(params, np.zeros(g.sino_shape), g)


def test_single_pair_is_memorised():
    ds = make_dataset(1, 0, 0, seed=2, image_size=32, max_ellipses=4)
    net = NetworkConfig(scales=2, channels_per_layer=32, skip_channels=(4, 4), output_size=32, dtype="float32")
    cfg = TrainConfig(net=net, epochs=1500, batch_size=1, lr=1e-3)
    params, log = train_postprocessor(ds, cfg)
    out = apply_postprocessor(params, ds.train[0].observation, ds.geometry, cfg.fbp_filter)
    assert log.epochs[-1].train_mse <= 1e-4
    assert np.mean((out - ds.train[0].ground_truth) ** 2) <= 1e-4
    assert log.best_val_mse is None and log.best_epoch == 1500
