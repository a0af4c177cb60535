import ast
import dataclasses
import json
import math
from pathlib import Path

import numpy as np
import pytest

from uneq import training
from uneq.losses import LossArrangement
from uneq.tensor import NonFiniteError
from uneq.training import (
    DiagnosticsRecord,
    Status,
    TrainConfig,
    adam_update,
    growth_schedule,
    init_state,
    run_training,
    sliding_windows,
    stability_diagnose,
    train_step,
)


def _snapshot(state):
    return {n: {k: v.tobytes() for k, v in p.items()} for n, p in state.params.items()}


def _record(step=0, gn=(1.0, 1.0, 1.0), div=(0.5, 0.5), **kw):
    base = dict(step=step, stage=0, alpha=1.0, loss_d=0.1, loss_g1=0.2, loss_g2=0.3,
                grad_norm_d=gn[0], grad_norm_g1=gn[1], grad_norm_g2=gn[2],
                diversity_g1=div[0], diversity_g2=div[1])
    base.update(kw)
    return DiagnosticsRecord(**base)


# -- schedule ---------------------------------------------------------------

def test_growth_schedule_example():
    cfg = TrainConfig(steps_per_stage=1000, fade_fraction=0.5)
    g = growth_schedule(1250, cfg)
    assert (g.stage, g.alpha) == (1, 0.5)


@pytest.mark.parametrize("step, expected", [
    (0, (0, 1.0)), (999, (0, 1.0)), (1000, (1, 0.0)), (1500, (1, 1.0)), (1999, (1, 1.0)),
    (2100, (2, 0.2)), (3000, (3, 0.0)), (9000, (3, 1.0)), (10**9, (3, 1.0)),
])
def test_growth_schedule_table(step, expected):
    g = growth_schedule(step, TrainConfig())
    assert g.stage == expected[0]
    assert g.alpha == pytest.approx(expected[1])


def test_growth_schedule_clamps_to_max_stage():
    cfg = TrainConfig(max_stage=1, steps_per_stage=10)
    assert growth_schedule(1000, cfg).stage == 1


# -- adam -------------------------------------------------------------------

def test_adam_zero_grad_leaves_param_and_decays_moments():
    p = np.array([1.0, -2.0])
    m, v = np.array([0.5, 0.5]), np.array([0.25, 0.25])
    new_p, new_m, new_v = adam_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1e-3, 0.0, 0.99, 1e-8, 1)
    np.testing.assert_array_equal(new_p, p)
    _, m2, v2 = adam_update(p, np.zeros(2), m, v, 1e-3, 0.9, 0.99, 1e-8, 3)
    np.testing.assert_allclose(m2, 0.45)
    np.testing.assert_allclose(v2, 0.2475)


def test_adam_first_step():
    new_p, _, _ = adam_update(np.zeros(1), np.ones(1), np.zeros(1), np.zeros(1), 1e-3, 0.0, 0.99, 1e-8, 1)
    assert new_p[0] == pytest.approx(-9.99999e-4, rel=1e-6)


def test_adam_rejects_non_finite_grad():
    with pytest.raises(NonFiniteError):
        adam_update(np.zeros(2), np.array([1.0, np.nan]), np.zeros(2), np.zeros(2), 1e-3, 0.0, 0.99, 1e-8, 1)


# -- train_step -------------------------------------------------------------

def test_step_changes_all_three_networks_and_leaves_input_alone(small_config):
    state = init_state(small_config)
    before = _snapshot(state)
    new, rec = train_step(state, small_config)
    assert _snapshot(state) == before
    after = _snapshot(new)
    for name in ("g1", "g2", "d"):
        assert after[name] != before[name], name
    assert new.step == 1 and rec.step == 0
    assert rec.status == Status.HEALTHY.value


def test_each_update_touches_only_its_own_network(small_config, monkeypatch):
    real = training._step_network
    seen = []

    def spy(name, state, params, m, v, *rest):
        before = {n: {k: a.tobytes() for k, a in p.items()} for n, p in params.items()}
        out = real(name, state, params, m, v, *rest)
        after = {n: {k: a.tobytes() for k, a in p.items()} for n, p in params.items()}
        changed = {n for n in params if after[n] != before[n]}
        seen.append((name, changed))
        return out

    monkeypatch.setattr(training, "_step_network", spy)
    for cfg in (small_config, dataclasses.replace(
            small_config, arrangement=LossArrangement("classifier", "swap_classification", "l1", "l1"))):
        seen.clear()
        train_step(init_state(cfg), cfg)
        assert seen == [("d", {"d"}), ("g1", {"g1"}), ("g2", {"g2"})]


def test_diametric_losses_see_different_batches(small_config, monkeypatch):
    real = training.diametric_pair
    calls = []

    def spy(logits):
        calls.append(logits.data.copy())
        return real(logits)

    monkeypatch.setattr(training, "diametric_pair", spy)
    train_step(init_state(small_config), small_config)
    assert len(calls) == 2
    assert not np.array_equal(calls[0], calls[1])


def test_zero_learning_rate_is_identity(small_config):
    cfg = dataclasses.replace(small_config, lr_g=0.0, lr_d=0.0, steps=8)
    state = init_state(cfg)
    before = _snapshot(state)
    final, records, exploded = run_training(cfg, state)
    assert not exploded and len(records) == 8
    assert _snapshot(final) == before


def test_fifty_step_runs_are_identical(small_config):
    cfg = dataclasses.replace(small_config, steps=50)
    _, a, _ = run_training(cfg)
    _, b, _ = run_training(cfg)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_seed_changes_trajectory(small_config):
    _, a, _ = run_training(dataclasses.replace(small_config, steps=3))
    _, b, _ = run_training(dataclasses.replace(small_config, steps=3, seed=8))
    assert a[-1].loss_d != b[-1].loss_d


def test_growth_advances_during_training(small_config):
    state, records, _ = run_training(small_config)
    assert [r.stage for r in records[:7]] == [0] * 6 + [1]
    assert records[6].alpha == 0.0 and records[7].alpha == pytest.approx(1 / 3)
    assert state.growth.stage == 1 and state.growth.alpha == 1.0


def test_non_finite_update_is_skipped_and_flagged(small_config, monkeypatch):
    real = training._generator_loss

    def poisoned(me, *a):
        fn = real(me, *a)
        if me != 1:
            return fn

        def bad(leaves):
            loss = fn(leaves)
            return loss * float("nan")
        return bad

    monkeypatch.setattr(training, "_generator_loss", poisoned)
    state = init_state(small_config)
    new, rec = train_step(state, small_config)
    assert rec.status == Status.EXPLODING.value
    assert math.isnan(rec.loss_g1) and rec.update_norm_g1 == 0.0
    assert _snapshot(new)["g1"] == _snapshot(state)["g1"]
    assert _snapshot(new)["g2"] != _snapshot(state)["g2"]


def test_persistent_explosion_stops_the_loop(small_config):
    cfg = dataclasses.replace(small_config, explode_threshold=0.0, steps=20)
    state, records, exploded = run_training(cfg)
    assert exploded and len(records) == cfg.diag_window == state.step


def test_config_validation():
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError, match="max_stage"):
        TrainConfig(max_stage=4)
    with pytest.raises(ValueError, match="beta1"):
        TrainConfig(beta1=1.0)


def test_dynamics_hash_ignores_run_length():
    assert TrainConfig(steps=10).dynamics_hash() == TrainConfig(steps=500, checkpoint_every=7).dynamics_hash()
    assert TrainConfig(seed=1).dynamics_hash() != TrainConfig(seed=2).dynamics_hash()


# -- diagnostics ------------------------------------------------------------

def test_nan_grad_norm_window_is_exploding():
    window = [_record(0), _record(1, gn=(float("nan"), 1.0, 1.0))]
    assert stability_diagnose(window, TrainConfig()) is Status.EXPLODING


def test_large_grad_norm_window_is_exploding():
    window = [_record(0), _record(1, gn=(1.0, 1e3 + 1, 1.0))]
    assert stability_diagnose(window, TrainConfig()) is Status.EXPLODING


def test_constant_window_is_static():
    window = [_record(i, gn=(0.0, 0.0, 0.0), div=(0.3, 0.3)) for i in range(10)]
    assert stability_diagnose(window, TrainConfig()) is Status.STATIC


def test_varying_window_is_healthy():
    window = [_record(i, gn=(1.0, 0.9, 1.1), div=(0.1 * i, 0.05 * i)) for i in range(10)]
    assert stability_diagnose(window, TrainConfig()) is Status.HEALTHY


def test_frozen_updates_are_static():
    window = [_record(i, div=(0.1 * i, 0.2), update_norm_d=0.0, update_norm_g1=0.0, update_norm_g2=0.0)
              for i in range(5)]
    assert stability_diagnose(window, TrainConfig()) is Status.STATIC


def test_diagnose_needs_two_records():
    with pytest.raises(ValueError):
        stability_diagnose([_record()], TrainConfig())


def test_sliding_windows():
    recs = [_record(i) for i in range(5)]
    wins = sliding_windows(recs, 3)
    assert [[r.step for r in w] for w in wins] == [[0, 1, 2], [1, 2, 3], [2, 3, 4]]
    assert len(sliding_windows(recs, 10)) == 1


def test_record_json_round_trip():
    rec = _record(3, gn=(float("nan"), 1.0, 2.0), update_norm_d=0.5, update_norm_g1=0.1, update_norm_g2=0.2)
    text = rec.to_json()
    assert "NaN" not in text
    back = DiagnosticsRecord.from_dict(json.loads(text))
    assert math.isnan(back.grad_norm_d)
    assert back.update_norms == (0.5, 0.1, 0.2)


# -- structural ---------------------------------------------------------------

ENGINE = ("tensor.py", "networks.py", "losses.py", "training.py")
INGEST = {"open", "load", "loadtxt", "fromfile", "imread", "read_ppm", "read_bytes", "read_text", "genfromtxt"}


@pytest.mark.parametrize("module", ENGINE)
def test_engine_has_no_ingestion_path(module):
    src = Path(training.__file__).with_name(module).read_text()
    tree = ast.parse(src)
    imported = {a.name for n in ast.walk(tree) if isinstance(n, (ast.Import, ast.ImportFrom)) for a in n.names}
    called = {(n.func.attr if isinstance(n.func, ast.Attribute) else getattr(n.func, "id", None))
              for n in ast.walk(tree) if isinstance(n, ast.Call)}
    assert not (called & INGEST), called & INGEST
    assert not ({"PIL", "imageio", "read_ppm", "checkpoint_load"} & imported)
