import numpy as np
import pytest

from prunelab import tensor as tn
from prunelab.errors import ConfigError, ContractError, FormatError, ShapeError
from prunelab.masking import PruneMask
from prunelab.model import (
    EMBED,
    PROBE_SEED,
    ComponentKind,
    ModelConfig,
    ParamKey,
    block_inputs,
    discretize,
    forward,
    init_model,
    load_checkpoint,
    make_probe_inputs,
    model_forward,
    save_checkpoint,
    selective_scan,
)
from prunelab.tasks import Batch


def reference_block(params, x, mode="unconstrained"):
    """Plain per-timestep loop for one block, independent of the tape ops."""
    K = ComponentKind
    u = x @ params[K.LINEAR_IN].T
    gate = 1 / (1 + np.exp(-(x @ params[K.GATE_PROJECTION].T)))
    a = params[K.STATE_TRANSITION] if mode == "unconstrained" else -np.exp(params[K.STATE_TRANSITION])
    seq, dim = x.shape
    h = np.zeros((dim, a.size))
    out = np.zeros((seq, dim))
    for t in range(seq):
        delta = np.log1p(np.exp(params[K.DELTA_PROJECTION] @ x[t]))
        decay = np.exp(delta * a)
        b = params[K.INPUT_PROJECTION] @ u[t]
        c = params[K.OUTPUT_PROJECTION] @ u[t]
        h = decay * h + np.outer(u[t], delta * b)
        y = h @ c + u[t] * params[K.SKIP_TERM]
        out[t] = params[K.LINEAR_OUT] @ (y * gate[t])
    return out


@pytest.mark.parametrize("mode", ["unconstrained", "stable"])
@pytest.mark.parametrize("per_state", [False, True])
def test_selective_scan_matches_loop(mode, per_state, rng):
    cfg = ModelConfig(n_layers=1, model_dim=4, state_dim=3, param_mode=mode, delta_per_state=per_state)
    model = init_model(cfg, seed=3)
    block = model.block(0)
    x = rng.normal(size=(7, 4))
    np.testing.assert_allclose(selective_scan(block, x, mode=mode).data, reference_block(block, x, mode), atol=1e-12)


def test_selective_scan_mask_equals_zeroed_weights(toy_model, rng):
    block = toy_model.block(0)
    mask = {k: rng.random(v.shape) > 0.5 for k, v in block.items()}
    zeroed = {k: v * mask[k] for k, v in block.items()}
    x = rng.normal(size=(2, 5, 6))
    np.testing.assert_allclose(selective_scan(block, x, mask=mask).data, selective_scan(zeroed, x).data)


def test_selective_scan_shape_contracts(toy_model):
    with pytest.raises(ShapeError):
        selective_scan(toy_model.block(0), np.ones((3, 5)))
    with pytest.raises(ShapeError):
        selective_scan(toy_model.block(0), np.ones(6))
    with pytest.raises(ContractError):
        selective_scan(toy_model.block(0), np.ones((1, 0, 6)))


def test_discretize_values_and_contracts():
    mags = discretize(np.array([-1.0, -0.5]), np.array([0.5, 1.0]))
    np.testing.assert_allclose(mags, np.exp(np.outer([0.5, 1.0], [-1.0, -0.5])))
    stable = discretize(np.array([0.0]), np.array([2.0]), mode="stable")
    np.testing.assert_allclose(stable, [[np.exp(-2.0)]])
    with pytest.raises(ContractError):
        discretize(np.array([-1.0]), np.array([0.0]))
    with pytest.raises(ShapeError):
        discretize(np.array([-1.0, -2.0]), np.ones((3, 4)))


@pytest.mark.parametrize("mode,hi", [("stable", 0.999), ("unconstrained", 0.95)])
def test_init_decay_range(mode, hi):
    cfg = ModelConfig(n_layers=3, model_dim=8, state_dim=32, param_mode=mode)
    model = init_model(cfg, seed=0)
    for b in range(3):
        mags = discretize(model.params[ParamKey(b, ComponentKind.STATE_TRANSITION)], np.array([np.log(2.0)]), mode)
        assert mags.min() >= 0.5 - 1e-12 and mags.max() <= hi + 1e-12


def test_init_is_deterministic(toy_config):
    a, b = init_model(toy_config, seed=5), init_model(toy_config, seed=5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = init_model(toy_config, seed=6)
    assert not np.array_equal(a.params[EMBED], c.params[EMBED])


def test_model_forward_shapes_and_loss(toy_model, rng):
    x = rng.integers(0, 5, size=(3, 8))
    logits, traces = forward(toy_model, x)
    assert logits.shape == (3, 8, 5)
    assert len(traces) == 2 and traces[0].eig.shape == (3, 8, 3)
    res = model_forward(toy_model, Batch(x, x))
    assert res.per_example.shape == (3,)
    assert res.loss.item() == pytest.approx(res.per_example.mean())


def test_regression_forward_contracts():
    cfg = ModelConfig(n_layers=1, model_dim=4, state_dim=2, task_kind="regression", n_features=2, n_outputs=1)
    model = init_model(cfg, 0)
    assert forward(model, np.ones((2, 5, 2)))[0].shape == (2, 5, 1)
    with pytest.raises(ConfigError):
        forward(model, np.ones((2, 5, 3)))
    with pytest.raises(ConfigError):
        model_forward(model, Batch(np.ones((2, 5, 2)), np.ones((2, 5))))


def test_invalid_configs():
    with pytest.raises(ConfigError):
        ModelConfig(state_dim=0)
    with pytest.raises(ConfigError):
        ModelConfig(param_mode="other")
    with pytest.raises(ConfigError):
        ModelConfig(task_kind="ranking")


def test_probes_fixed_seed(toy_config):
    a = make_probe_inputs(toy_config)
    assert a.shape == (64, 32)
    np.testing.assert_array_equal(a, make_probe_inputs(toy_config, seed=PROBE_SEED))


def test_block_inputs_feed_forward(toy_model, rng):
    x = rng.integers(0, 5, size=(2, 6))
    xs = block_inputs(toy_model, x)
    _, traces = forward(toy_model, x)
    for got, trace in zip(xs, traces):
        np.testing.assert_allclose(got, trace.x_in)


def test_time_resolved_forward_matches(toy_model, rng):
    batch = Batch(rng.integers(0, 5, size=(2, 5)), rng.integers(0, 5, size=(2, 5)))
    plain = model_forward(toy_model, batch).loss.item()
    with tn.GradTape() as tape:
        res = model_forward(toy_model, batch, tape=tape, time_resolved=True)
    assert res.loss.item() == pytest.approx(plain, abs=1e-12)
    total, steps = tn.backward(tape, res.loss, per_step=True)
    key = ParamKey(1, ComponentKind.DELTA_PROJECTION)
    np.testing.assert_allclose(sum(steps[key].values()), total[key], atol=1e-12)


def test_checkpoint_round_trip(tmp_path, toy_model, rng):
    mask = PruneMask({k: rng.random(toy_model.params[k].shape) > 0.3 for k in toy_model.maskable_keys()})
    save_checkpoint(tmp_path / "m.ckpt", toy_model, mask)
    model, loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert model.config == toy_model.config
    assert all(np.array_equal(model.params[k], toy_model.params[k]) for k in toy_model.params)
    assert loaded.equals(mask)
    save_checkpoint(tmp_path / "d.ckpt", toy_model)
    assert load_checkpoint(tmp_path / "d.ckpt")[1] is None


def test_checkpoint_rejects_garbage(tmp_path, toy_model):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint\n")
    with pytest.raises(FormatError):
        load_checkpoint(bad)
    save_checkpoint(tmp_path / "m.ckpt", toy_model)
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "cut.ckpt")
