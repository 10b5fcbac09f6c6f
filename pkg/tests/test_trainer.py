import json

import numpy as np
import pytest
import torch

from daretinex.checkpoint import load_checkpoint
from daretinex.errors import EmptyDatasetError, IncompatibleCheckpointError, NumericalError
from daretinex.synthetic import toy_pairs
from daretinex.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    clip_grad_norm,
    iterate_batches,
    sample_rng,
    train_decomposition,
    train_enhancement,
)


# --- Adam ---------------------------------------------------------------------

def test_adam_first_step_scalar():
    w = torch.zeros((), dtype=torch.float64)
    state = AdamState({"w": w})
    adam_step(state, {"w": torch.ones((), dtype=torch.float64)}, lr=0.1)
    # m_hat = v_hat = 1 after bias correction
    assert float(w) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    assert state.step == 1


def test_adam_matches_hand_rolled_sequence(rng):
    grads = rng.standard_normal((5, 3))
    w = torch.zeros(3, dtype=torch.float64)
    state = AdamState({"w": w})
    m = v = np.zeros(3)
    ref = np.zeros(3)
    for k, g in enumerate(grads, 1):
        adam_step(state, {"w": torch.from_numpy(g)}, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(w.numpy(), ref, rtol=1e-12, atol=1e-15)
    assert state.exp_avg["w"].shape == w.shape and state.exp_avg_sq["w"].shape == w.shape


def test_adam_zero_gradient():
    w = torch.tensor([0.5, -1.0])
    state = AdamState({"w": w})
    adam_step(state, {"w": torch.zeros(2)}, lr=0.1)
    assert w.tolist() == [0.5, -1.0] and state.step == 1


def test_adam_deterministic(rng):
    g = torch.from_numpy(rng.standard_normal(4))
    results = []
    for _ in range(2):
        w = torch.ones(4, dtype=torch.float64)
        adam_step(AdamState({"w": w}), {"w": g.clone()}, lr=0.05)
        results.append(w)
    assert torch.equal(*results)


def test_adam_rejects_non_finite():
    state = AdamState({"enc.0.weight": torch.zeros(2)})
    with pytest.raises(NumericalError, match="enc.0.weight") as info:
        adam_step(state, {"enc.0.weight": torch.tensor([1.0, float("nan")])}, lr=0.1)
    assert info.value.name == "enc.0.weight"
    with pytest.raises(KeyError):
        adam_step(state, {"other": torch.zeros(2)}, lr=0.1)


def test_clip_grad_norm():
    grads = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    total = float(torch.sqrt(grads["a"] ** 2 + grads["b"] ** 2))
    assert total == pytest.approx(1.0, abs=1e-5)


# --- data order -----------------------------------------------------------------

def test_sample_rng_streams():
    assert sample_rng(0, 1, 2).random() == sample_rng(0, 1, 2).random()
    assert sample_rng(0, 1, 2).random() != sample_rng(0, 1, 3).random()


def test_iterate_batches_deterministic():
    data = toy_pairs(5, seed=1, size=16)
    cfg = TrainConfig(batch_size=2, patch_size=8)
    first = [[s.low for s in b] for b in iterate_batches(data, cfg, 0)]
    again = [[s.low for s in b] for b in iterate_batches(data, cfg, 0)]
    assert len(first) == 2
    for a, b in zip(first, again):
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


# --- config ---------------------------------------------------------------------

def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.patch_size, cfg.learning_rate, cfg.lambda_tv) == (4, 384, 1e-4, 0.2)
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip) == (0.9, 0.999, 1e-8, 5.0)
    assert cfg.total_epochs == 2000 and TrainConfig(phase="enh").total_epochs == 1000


@pytest.mark.parametrize("bad", [dict(batch_size=0), dict(patch_size=100), dict(lambda_tv=-1.0), dict(phase="x")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_file(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# toy\nbatch_size = 2\nlambda_tv=0.05\ndeterministic = false\noutput_dir = runs/x  # trailing\n")
    cfg = TrainConfig.from_file(path, seed=9, lambda_tv=None)
    assert (cfg.batch_size, cfg.lambda_tv, cfg.deterministic, cfg.output_dir, cfg.seed) == (2, 0.05, False, "runs/x", 9)
    path.write_text("bogus = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        TrainConfig.from_file(path)
    path.write_text("batch_size = two\n")
    with pytest.raises(ValueError, match="cannot parse"):
        TrainConfig.from_file(path)


# --- training loops ---------------------------------------------------------------

def tiny(tmp_path, **kw):
    base = dict(batch_size=2, patch_size=16, max_steps=3, output_dir=str(tmp_path), checkpoint_every=2,
                log_every=1, plot=False)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return toy_pairs(2, seed=3, size=24)


def test_decomposition_outputs(tmp_path, data):
    result = train_decomposition(tiny(tmp_path, plot=True), data)
    assert result.steps == 3 and len(result.history) == 3
    store = load_checkpoint(result.checkpoint)
    for key in ("phase", "step", "seed", "lambda_tv", "config_hash", "loss_history"):
        assert key in store.meta
    assert store.meta["phase"] == "decomposition" and store.meta["step"] == "3"
    keys = json.loads(store.meta["loss_history_keys"])
    assert len(json.loads(store.meta["loss_history"])) == 3 and "total" in keys
    assert load_checkpoint(result.da_checkpoint).meta["arch"] == "da_cnn"
    assert (tmp_path / "decom_step2.ckpt").exists() and (tmp_path / "loss_decomposition.png").exists()
    lines = (tmp_path / "train_decomposition.log").read_text().splitlines()
    assert len(lines) == 3
    fields = dict(item.split("=", 1) for item in lines[0].split())
    assert {"step", "total", "rc", "smooth", "equal", "da", "wall"} <= set(fields)


def test_empty_dataset(tmp_path):
    with pytest.raises(EmptyDatasetError):
        train_decomposition(tiny(tmp_path), [])


def test_divergence_dump(tmp_path, data):
    with pytest.raises(NumericalError) as info:
        train_decomposition(tiny(tmp_path, divergence_threshold=1e-9), data)
    assert set(info.value.batch_ids) == {"toy000", "toy001"}
    assert "batch_ids=" in (tmp_path / "divergence.txt").read_text()


def test_lambda_tv_ablation(tmp_path, data):
    # with the DA CNN frozen at zero and the MSE term switched off, lambda_tv has nothing to act on
    stores = []
    for lam in (0.0, 0.2):
        cfg = tiny(tmp_path / str(lam), lambda_tv=lam, da_init="zero", freeze_da=True, da_mse_weight=0.0)
        stores.append(load_checkpoint(train_decomposition(cfg, data).checkpoint))
    a, b = stores
    assert all(torch.equal(a.entries[k], b.entries[k]) for k in a.entries)
    cfg = tiny(tmp_path / "mse", lambda_tv=0.2, da_init="zero", freeze_da=True)
    c = load_checkpoint(train_decomposition(cfg, data).checkpoint)
    assert not all(torch.equal(a.entries[k], c.entries[k]) for k in a.entries)


def test_enhancement_freeze_and_range(tmp_path, data):
    decom = train_decomposition(tiny(tmp_path / "d"), data).checkpoint
    before = load_checkpoint(decom)
    result = train_enhancement(tiny(tmp_path / "e", patch_size=32, max_steps=2), toy_pairs(2, seed=3, size=32), decom)
    after = load_checkpoint(decom)
    assert before.equal(after)
    for rec in result.history:
        assert rec["decom_grad_norm"] == 0.0
        assert 0 < rec["i_out_min"] <= rec["i_out_max"] < 1
    assert load_checkpoint(result.checkpoint).meta["phase"] == "enhancement"


def test_enhancement_rejects_wrong_checkpoint(tmp_path, data):
    decom = train_decomposition(tiny(tmp_path / "d", max_steps=1), data)
    with pytest.raises(IncompatibleCheckpointError):
        train_enhancement(tiny(tmp_path / "e", patch_size=32, max_steps=1), toy_pairs(2, seed=3, size=32),
                          decom.da_checkpoint)


def test_config_hash_ignores_bookkeeping():
    a = TrainConfig(output_dir="x", log_every=1, plot=False, checkpoint_every=5)
    assert a.config_hash() == TrainConfig().config_hash()
    assert TrainConfig(seed=1).config_hash() != TrainConfig().config_hash()


@pytest.mark.slow
def test_enhancement_overfit(tmp_path):
    pairs = toy_pairs(2, seed=6, size=32)
    # a half-trained decomposer leaves a reconstruction floor the enhancer cannot get under
    decom = train_decomposition(tiny(tmp_path / "d", patch_size=32, max_steps=1500, checkpoint_every=0,
                                     log_every=100), pairs).checkpoint
    result = train_enhancement(tiny(tmp_path / "e", patch_size=32, max_steps=2000, epochs=2000,
                                    checkpoint_every=0, log_every=100), pairs, decom)
    assert result.steps == 2000
    assert result.history[-1]["total"] <= 0.2 * result.history[0]["total"]
