import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kcrlab.config import ConfigFile, DataSpec, RunConfig
from kcrlab.data import FILES, gen_data, load_dataset, read_idx, save_dataset, to_float, write_idx
from kcrlab.errors import ArgumentError, ConfigError, ParseError
from kcrlab.model import ModelConfig


@settings(max_examples=30, deadline=None)
@given(dtype=st.sampled_from(["u1", "i1", "i2", "i4", "f4", "f8"]),
       shape=st.lists(st.integers(0, 5), min_size=1, max_size=3), seed=st.integers(0, 1000))
def test_idx_round_trip(tmp_path_factory, dtype, shape, seed):
    rng = np.random.default_rng(seed)
    arr = (rng.normal(size=shape) * 50).astype(dtype)
    path = tmp_path_factory.mktemp("idx") / "a.idx"
    write_idx(path, arr)
    back = read_idx(path)
    assert back.dtype == np.dtype(dtype) and back.shape == arr.shape
    assert np.array_equal(back, arr)


def test_idx_header_layout_and_errors(tmp_path):
    p = tmp_path / "x"
    write_idx(p, np.arange(6, dtype=np.uint8).reshape(2, 3))
    raw = p.read_bytes()
    assert raw[:4] == bytes([0, 0, 0x08, 2])
    assert raw[4:12] == bytes([0, 0, 0, 2, 0, 0, 0, 3])
    assert raw[12:] == bytes(range(6))
    p.write_bytes(raw[:-1])
    with pytest.raises(ParseError):
        read_idx(p)
    p.write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(ParseError):
        read_idx(p)
    with pytest.raises(ArgumentError):
        write_idx(p, np.zeros(2, dtype=np.complex128))


def test_gen_data_noise_free_is_template_quantized():
    ds = gen_data(classes=3, n=30, image_side=8, noise=0.0, seed=2, n_val=9)
    assert ds.train_x.dtype == np.uint8 and ds.train_x.shape == (30, 8, 8)
    assert np.bincount(ds.train_y).tolist() == [10, 10, 10]
    for c in range(3):
        imgs = ds.train_x[ds.train_y == c]
        assert np.all(imgs == imgs[0])
        # templates are normalized to peak 1, so the brightest pixel is 64 + 128
        assert imgs[0].max() == 192
    # train and validation share templates
    assert np.array_equal(ds.val_x[ds.val_y == 0][0], ds.train_x[ds.train_y == 0][0])


def test_gen_data_seed_determinism(tmp_path):
    a, b = gen_data(n=40, n_val=8, seed=5), gen_data(n=40, n_val=8, seed=5)
    c = gen_data(n=40, n_val=8, seed=6)
    pa, pb = save_dataset(a, tmp_path / "a"), save_dataset(b, tmp_path / "b")
    for k in FILES:
        assert pa[k].read_bytes() == pb[k].read_bytes()
    assert not np.array_equal(a.train_x, c.train_x)
    back = load_dataset(pa)
    assert np.array_equal(back.train_x, a.train_x) and np.array_equal(back.val_y, a.val_y)
    with pytest.raises(ArgumentError):
        gen_data(classes=5, n=4)


def test_to_float_scaling():
    x = to_float(np.array([[[0, 255]]], dtype=np.uint8))
    assert x.shape == (1, 1, 2, 1) and x[0, 0, 1, 0] == 1.0
    assert to_float(np.full((1, 2, 2, 1), 0.5))[0, 0, 0, 0] == 0.5


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(t_warm=50, t_train=40)
    with pytest.raises(ConfigError):
        RunConfig(gamma=0.6)
    with pytest.raises(ConfigError):
        RunConfig(x=0.0)
    with pytest.raises(ConfigError):
        DataSpec(n=2, classes=4)
    assert RunConfig().rank(2048, 64) == 16
    assert RunConfig(gamma=0.01).rank(10, 3) == 1


def test_lr_schedule_shape():
    cfg = RunConfig(lr=1e-2, lr_min=1e-4, lr_warmup_epochs=1)
    lrs = [cfg.lr_at(s, 100, 10) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-4 + (1e-2 - 1e-4) / 10)
    assert lrs[9] == pytest.approx(1e-2)
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] >= 1e-4


def test_config_file_round_trip_and_strictness(tmp_path):
    cf = ConfigFile(model=ModelConfig(D=32, heads=2), run=RunConfig(lam=0.2, seed=3), data=DataSpec(n=100))
    path = tmp_path / "cfg.json"
    cf.dump(path)
    back = ConfigFile.load(path)
    assert back == cf
    doc = json.loads(path.read_text())
    for bad in ({**doc, "schema": 2}, {**doc, "extra": {}}, {**doc, "run": {"lamda": 1}},
                {**doc, "model": {"D": 10, "heads": 4}}, {**doc, "data": []}):
        with pytest.raises(ConfigError):
            ConfigFile.from_dict(bad)
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        ConfigFile.load(path)
    assert ConfigFile.from_dict({"schema": 1}) == ConfigFile()
