import json

import numpy as np
import pytest

import prunelab.engine as engine
from prunelab.engine import LOG_FIELDS, PruneConfig, read_run_log, run_pruning, write_run_log
from prunelab.errors import ConfigError, FormatError
from prunelab.masking import n_to_prune
from prunelab.model import ModelConfig, init_model, kind_group
from prunelab.schedule import pruning_iterations
from prunelab.tasks import TaskSpec, gen_task
from prunelab.training import OptimizerConfig

SPEC = TaskSpec(kind="copy", vocab_size=5, seq_len=8, n_train=64, n_val=32, delay=2)
MODEL = ModelConfig(n_layers=2, model_dim=8, state_dim=4, vocab_size=5, n_outputs=5)
OPT = OptimizerConfig(batch_size=8)


def quick(**kw):
    base = dict(s_f=0.5, T=40, prune_every_k=10, finetune_steps=10, score_batches=2)
    return PruneConfig(**(base | kw))


@pytest.fixture(scope="module")
def dataset():
    return gen_task(SPEC)


@pytest.mark.parametrize("strategy", ["global", "layerwise", "allocated"])
def test_run_reaches_final_sparsity(dataset, strategy, tmp_path):
    cfg = quick(strategy=strategy)
    model = init_model(MODEL, 0)
    result = run_pruning(model, dataset, cfg, OPT, log_path=tmp_path / "log.jsonl")
    events = pruning_iterations(cfg.schedule_state())
    assert [r["iteration"] for r in result.log] == events
    achieved = [r["achieved_sparsity"] for r in result.log]
    assert all(b >= a for a, b in zip(achieved, achieved[1:]))
    keep = result.mask.keep
    scopes = {
        "global": [(list(keep), 0.5)],
        "layerwise": [([k for k in keep if k.block == b], 0.5) for b in range(MODEL.n_layers)],
        "allocated": [([k for k in keep if kind_group(k.kind) == g], t) for g, t in cfg.allocation.items()],
    }[strategy]
    for keys, target in scopes:
        size = sum(keep[k].size for k in keys)
        assert sum(int((~keep[k]).sum()) for k in keys) == n_to_prune(target, size)
    assert len(result.train_log) == cfg.total_steps
    for key, keep in result.mask.keep.items():
        assert np.all(model.params[key][~keep] == 0)
    assert read_run_log(tmp_path / "log.jsonl") == json.loads(json.dumps(result.log))


def test_masks_only_shrink(dataset, monkeypatch):
    masks = []
    original = engine.build_mask

    def spy(*args, **kw):
        out = original(*args, **kw)
        masks.append(out)
        return out

    monkeypatch.setattr(engine, "build_mask", spy)
    run_pruning(init_model(MODEL, 1), dataset, quick(correct=False), OPT)
    assert len(masks) == len(pruning_iterations(quick().schedule_state()))
    for before, after in zip(masks, masks[1:]):
        for key in before.keep:
            assert not np.any(after.keep[key] & ~before.keep[key])


def test_zero_target_is_plain_training(dataset):
    result = run_pruning(init_model(MODEL, 0), dataset, quick(s_f=0.0), OPT)
    assert result.log == [] and result.mask.n_masked == 0
    assert all(r.penalty == 0.0 for r in result.train_log)


def test_run_is_deterministic(dataset):
    a = run_pruning(init_model(MODEL, 0), dataset, quick(seed=4), OPT)
    b = run_pruning(init_model(MODEL, 0), dataset, quick(seed=4), OPT)
    assert a.mask.equals(b.mask) and a.log == b.log


def test_stable_mode_logs_no_corrections(dataset):
    cfg = ModelConfig(**{**MODEL.__dict__, "param_mode": "stable"})
    result = run_pruning(init_model(cfg, 0), dataset, quick(), OPT)
    assert result.corrections_total == 0
    assert all(r["violations"] == 0 for r in result.log)


def test_log_fields_present(dataset):
    result = run_pruning(init_model(MODEL, 0), dataset, quick(), OPT)
    for rec in result.log:
        assert set(LOG_FIELDS) <= set(rec)


def test_run_log_format_errors(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text('{"step": 0}\n')
    with pytest.raises(FormatError, match="missing fields"):
        read_run_log(path)
    path.write_text("not json\n")
    with pytest.raises(FormatError):
        read_run_log(path)
    write_run_log(path, [{f: float("inf") if f == "max_eig" else 0 for f in LOG_FIELDS}])
    assert read_run_log(path)[0]["max_eig"] == "inf"


def test_config_validation():
    with pytest.raises(ConfigError):
        PruneConfig(schedule="step")
    with pytest.raises(ConfigError):
        PruneConfig(strategy="random")
    with pytest.raises(ConfigError):
        PruneConfig(epsilon=0.2)
    with pytest.raises(ConfigError):
        PruneConfig(s_f=1.0)
    with pytest.raises(ConfigError):
        PruneConfig.from_dict({"sparsity": 0.5})
    assert PruneConfig(T=100, finetune_steps=20).total_steps == 120
