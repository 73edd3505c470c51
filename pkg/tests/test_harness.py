import math

import numpy as np
import pytest

import fedtrust.harness as H
from fedtrust.config import desk_preset, enable_defense
from fedtrust.data import write_idx
from fedtrust.errors import DataError, RoundError
from fedtrust.io import client_rows, round_rows
from fedtrust.model import AdamState, accuracy, build_model, local_train
from fedtrust.rng import derive_seed


def _small(**kw):
    base = {"rounds": 4, "dataset.samples": 3000}
    base.update(kw)
    return desk_preset(**base)


def test_cosine_lr():
    assert H.cosine_lr(0.1, 1, 10) == 0.1
    assert H.cosine_lr(0.1, 6, 10) == pytest.approx(0.05)
    assert H.cosine_lr(0.1, 10, 10) > 0
    assert H.cosine_lr(0.1, 7, 10, "constant") == 0.1


def test_clean_iid_fedavg_reaches_95():
    records = H.run_experiment(desk_preset())
    assert len(records) == 15 and [r.round for r in records] == list(range(1, 16))
    assert records[-1].test_accuracy >= 0.95


def test_identical_config_gives_identical_records():
    cfg = enable_defense(_small(**{"attack.kind": "scaling", "attack.fraction": 0.3, "model.kind": "mlp_bn",
                                   "model.hidden": [8]}))
    a, b = H.run_experiment(cfg), H.run_experiment(cfg)
    assert round_rows(a) == round_rows(b)
    assert client_rows(a) == client_rows(b)


def test_zero_attack_fraction_is_all_benign():
    records = H.run_experiment(enable_defense(_small(**{"attack.kind": "scaling", "attack.fraction": 0.0})))
    for r in records:
        assert all(c.attack == "none" and not c.malicious for c in r.clients)
        assert r.fnr == 0.0 and not r.fnr_defined


def test_metrics_are_consistent():
    cfg = enable_defense(_small(**{"attack.kind": "sign_flip", "attack.fraction": 0.3}))
    for r in H.run_experiment(cfg):
        assert r.tp + r.fp + r.tn + r.fn == cfg.clients
        assert r.tp + r.fn == 3
        assert sum(c.weight for c in r.clients) == pytest.approx(1.0)
        assert 0 <= r.test_accuracy <= 1 and 0 <= r.val_accuracy <= 1
        assert {c.attack for c in r.clients if c.malicious} == {"sign_flip"}


def test_quantized_run_and_label_flip_setup():
    plain = H.run_experiment(_small())
    quant = H.run_experiment(_small(**{"quantization.enabled": True}))
    assert np.abs(np.array([r.test_accuracy for r in plain]) - [r.test_accuracy for r in quant]).max() < 0.02
    cfg = _small(**{"attack.kind": "label_flip", "attack.fraction": 0.3})
    fed = H.setup_federation(cfg)
    clean = H.setup_federation(_small())
    for k in range(cfg.clients):
        changed = np.mean(fed.client_data[k].labels != clean.client_data[k].labels)
        assert (changed > 0.3) if k in fed.malicious else (changed == 0)


def test_missing_mnist_is_a_data_error(tmp_path, monkeypatch):
    monkeypatch.delenv("FEDTRUST_DATA_DIR", raising=False)
    cfg = _small(**{"dataset.kind": "mnist", "dataset.dim": 784, "dataset.data_dir": str(tmp_path)})
    assert H.find_mnist(tmp_path) is None
    with pytest.raises(DataError):
        H.run_experiment(cfg)


def test_mnist_path_runs_on_idx_files(tmp_path, monkeypatch):
    # tiny stand-in files in the MNIST layout: class k lights up row k
    rng = np.random.default_rng(0)
    for (img, lab), n in zip(H.MNIST_FILES, (600, 200)):
        labels = np.arange(n) % 10
        images = rng.integers(0, 40, size=(n, 28, 28))
        images[np.arange(n), labels * 2, :] = 255
        write_idx(tmp_path / img, tmp_path / lab, images, labels)
    monkeypatch.setenv("FEDTRUST_DATA_DIR", str(tmp_path))
    cfg = _small(**{"dataset.kind": "mnist", "dataset.dim": 784, "dataset.samples": 700, "rounds": 3,
                    "model.kind": "mlp_bn", "model.hidden": [16]})
    assert H.find_mnist(cfg.dataset.resolved_data_dir()) is not None
    pool = H.load_pool(cfg)
    assert pool.dim == 784 and len(pool.labels) == 700
    records = H.run_experiment(cfg)
    assert records[-1].test_accuracy > 0.5


def test_module_errors_carry_the_round(monkeypatch):
    calls = []
    orig = H.aggregate

    def failing(*args, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise ValueError("boom")
        return orig(*args, **kw)

    monkeypatch.setattr(H, "aggregate", failing)
    with pytest.raises(RoundError) as info:
        H.run_experiment(_small())
    assert info.value.round_index == 2 and "boom" in str(info.value)


def _reference_fedavg(cfg):
    # textbook FedAvg written out directly, sharing only data setup and local training
    fed = H.setup_federation(cfg)
    theta = build_model(cfg.model.kind, fed.input_dim, cfg.model.hidden, fed.classes,
                        derive_seed(cfg.seed, "model"))
    accs = []
    for t in range(1, cfg.rounds + 1):
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * (t - 1) / cfg.rounds))
        total = sum(len(d.labels) for d in fed.client_data)
        step = np.zeros(theta.layout.size)
        for k, data in enumerate(fed.client_data):
            adam = AdamState.fresh(theta.layout.size, lr, cfg.weight_decay)
            local = local_train(theta, data, cfg.local_epochs, adam, derive_seed(cfg.seed, "client"),
                                cfg.batch_size, stream_labels=(k, t))
            delta = (local.values.astype(np.float64) - theta.values.astype(np.float64)).astype(np.float32)
            step += len(data.labels) / total * delta.astype(np.float64)
        theta = theta.copy()
        theta.values[:] = (theta.values.astype(np.float64) + step).astype(np.float32)
        accs.append(accuracy(theta, fed.test))
    return theta, accs


def test_defense_off_matches_reference_fedavg():
    cfg = _small(**{"rounds": 5, "dataset.separation": 2.0})
    records = H.run_experiment(cfg)
    _, accs = _reference_fedavg(cfg)
    assert np.allclose([r.test_accuracy for r in records], accs, atol=1e-6)


# --------------------------------------------------------------------------
# grids


def _grid_cfgs():
    cfgs = []
    for kind in ("fedavg", "coord_median"):
        for attack in ("none", "sign_flip"):
            cfgs.append(_small(**{"rounds": 2, "aggregator.kind": kind, "attack.kind": attack,
                                  "attack.fraction": 0.3 if attack != "none" else 0.0,
                                  "name": f"{kind}-{attack}"}))
    return cfgs


def test_two_by_two_grid():
    rows, records = H.run_grid(_grid_cfgs())
    assert len(rows) == 4 and len(records) == 4
    header, table = H.pivot(rows)
    assert header == ["method", "none", "sign_flip", "avg"]
    assert [r[0] for r in table] == ["fedavg", "coord_median"]
    for r in table:
        assert r[3] == pytest.approx((r[1] + r[2]) / 2)


def test_parallel_grid_equals_serial():
    serial, _ = H.run_grid(_grid_cfgs())
    parallel, _ = H.run_grid(_grid_cfgs(), parallelism=2)
    assert serial == parallel


def test_empty_grid():
    rows, records = H.run_grid([])
    assert rows == [] and records == []
    header, table = H.pivot(rows)
    assert header == ["method", "avg"] and table == []


def test_method_label():
    assert H.method_label(enable_defense(desk_preset())) == "fedbnp_trust"
    assert H.method_label(desk_preset(**{"aggregator.kind": "fedbnp"})) == "fedbnp"
