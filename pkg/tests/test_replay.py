import copy

import numpy as np
import pytest
import torch

from segreplay.adapter import AdapterConfig
from segreplay.config import (
    BudgetConfig,
    DiffusionConfig,
    ExperimentConfig,
    ReplayConfig,
)
from segreplay.denoiser import ArchConfig
from segreplay.errors import ConfigurationError, StateError
from segreplay.replay import (
    ScheduleState,
    init_schedule_state,
    memory_evoke_loss,
    memory_update_loss,
    prompt_tokens,
    run_round,
    run_schedule,
    suite_for_seed,
    synthesize_replay,
)
from segreplay.segmenter import SegArchConfig, seg_loss
from segreplay.taskgen import LabeledImage, SuiteConfig, TaskDataset


def tiny_config(**overrides) -> ExperimentConfig:
    kwargs = dict(
        suite=SuiteConfig(image_size=16, samples_per_task=16),
        diffusion=DiffusionConfig(steps=8),
        replay=ReplayConfig(replay_count=4, ddim_steps=4),
        budgets=BudgetConfig(seg_steps=3, gen_steps=3, seg_batch=4, gen_batch=2),
        denoiser=ArchConfig(c_max=4, widths=(4, 8), step_dim=4, embed_dim=8),
        segmenter=SegArchConfig(widths=(4, 8)),
        adapter=AdapterConfig(dim=8, ratio=2),
    )
    kwargs.update(overrides)
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


def _fake_pair(task_id):
    return LabeledImage(
        image=np.zeros((4, 4), dtype=np.float32),
        mask=np.zeros((4, 4), dtype=np.int16),
        task_id=task_id,
    )


# ----------------------------------------------------------- loss arithmetic


def test_memory_evoke_arithmetic_exact():
    stub_values = {3: 1.0, 1: 2.0}

    def stub(net, batch):
        return torch.tensor(stub_values[batch[0].task_id])

    loss = memory_evoke_loss(
        None, [_fake_pair(3)], {1: [_fake_pair(1)]}, alpha=0.25, loss_fn=stub
    )
    assert float(loss) == 1.0 + 0.25 * 2.0


def test_memory_evoke_empty_past_reduces_to_current():
    def stub(net, batch):
        return torch.tensor(0.625)

    loss = memory_evoke_loss(None, [_fake_pair(1)], {}, alpha=0.25, loss_fn=stub)
    assert float(loss) == 0.625


def test_memory_evoke_rejects_current_task_replay():
    def stub(net, batch):
        return torch.tensor(1.0)

    with pytest.raises(ValueError):
        memory_evoke_loss(None, [_fake_pair(1)], {1: [_fake_pair(1)]}, 0.25, loss_fn=stub)
    with pytest.raises(ValueError):
        memory_evoke_loss(None, [], {}, 0.25, loss_fn=stub)


def test_memory_update_arithmetic_exact():
    values = {3: 0.4, 1: 0.8, 2: 1.2}

    def stub_loss(denoiser, batch, schedule, rng, **kwargs):
        return torch.tensor(values[batch[0].task_id])

    loss = memory_update_loss(
        net=None,
        current_batch=[_fake_pair(3)],
        replay_batches={1: [_fake_pair(1)], 2: [_fake_pair(2)]},
        schedule=None,
        prompts={},
        beta=0.25,
        rng=None,
        loss_fn=stub_loss,
        c_max=4,
    )
    assert float(loss) == pytest.approx(0.4 + 0.25 * 2.0, abs=1e-12)


def test_memory_update_empty_past():
    def stub_loss(denoiser, batch, schedule, rng, **kwargs):
        return torch.tensor(0.4)

    loss = memory_update_loss(None, [_fake_pair(1)], {}, None, {}, 0.25, None,
                              loss_fn=stub_loss, c_max=4)
    assert float(loss) == pytest.approx(0.4, abs=1e-12)


def test_memory_losses_affine_in_tradeoff():
    # two-point evaluation: L(a) must equal L(0) + a * (L(1) - L(0))
    def stub(net, batch):
        return torch.tensor({1: 0.7, 2: 1.3, 3: 0.9}[batch[0].task_id])

    batches = {2: [_fake_pair(2)], 3: [_fake_pair(3)]}

    def evoke(alpha):
        return float(memory_evoke_loss(None, [_fake_pair(1)], batches, alpha, loss_fn=stub))

    l0, l1 = evoke(0.0), evoke(1.0)
    for alpha in (0.25, 0.5, 2.0):
        assert evoke(alpha) == pytest.approx(l0 + alpha * (l1 - l0), abs=1e-9)


# ----------------------------------------------------------- schedule pieces


@pytest.fixture(scope="module")
def tiny_run():
    cfg = tiny_config()
    specs, datasets = suite_for_seed(cfg, seed=0)
    return cfg, specs, datasets


def test_prompt_tokens_by_method(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    state_toa = init_schedule_state("CGR-TOA", order, specs, cfg, 0)
    raw = prompt_tokens(state_toa, 1)
    assert raw.shape == (3, cfg.adapter.dim)

    state_ft = init_schedule_state("FineTune", order, specs, cfg, 0)
    assert prompt_tokens(state_ft, 1) is None


def test_run_round_bookkeeping(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    state = init_schedule_state("CGR", order, specs, cfg, 0)
    state = run_round(state, datasets[order[0]], cfg, 0)
    assert state.round == 2
    assert state.replay_sets == {}
    assert state.segmenter.has_head(order[0])
    assert order[0] in state.adapters

    state = run_round(state, datasets[order[1]], cfg, 0)
    assert state.round == 3
    assert sorted(state.replay_sets) == [order[0]]
    replay = state.replay_sets[order[0]]
    assert len(replay.pairs) == cfg.replay.replay_count
    assert replay.provenance["sample_count"] == cfg.replay.replay_count
    assert replay.provenance["generator_checkpoint_id"] == "round1"


def test_run_round_wrong_dataset(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    state = init_schedule_state("CGR", order, specs, cfg, 0)
    with pytest.raises(StateError):
        run_round(state, datasets[order[1]], cfg, 0)


def test_guard_active_during_round(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    seen = []

    class Recording(TaskDataset):
        @property
        def train(self):
            from segreplay.taskgen import _ACTIVE_TASK

            seen.append(_ACTIVE_TASK.get())
            return super().train

    ds = datasets[order[0]]
    recording = Recording(ds.spec, ds._train, ds._val, ds._test)
    state = init_schedule_state("FineTune", order, specs, cfg, 0)
    run_round(state, recording, cfg, 0)
    assert seen and all(active == order[0] for active in seen)


def test_synthesize_replay_guards(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    state = init_schedule_state("CGR", order, specs, cfg, 0)
    with pytest.raises(StateError):  # not a past task yet
        synthesize_replay(state, order[0], cfg, torch.Generator())
    state = run_round(state, datasets[order[0]], cfg, 0)
    missing = init_schedule_state("CGR", order, specs, cfg, 0)
    missing.round = 2
    with pytest.raises(StateError):  # past but no adapter recorded
        synthesize_replay(missing, order[0], cfg, torch.Generator())


def test_synthesize_replay_determinism_and_codomain(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    state = init_schedule_state("CGR", order, specs, cfg, 0)
    state = run_round(state, datasets[order[0]], cfg, 0)
    import dataclasses

    one = dataclasses.replace(cfg, replay=ReplayConfig(replay_count=1, ddim_steps=4))
    a = synthesize_replay(state, order[0], one, torch.Generator().manual_seed(5))
    b = synthesize_replay(state, order[0], one, torch.Generator().manual_seed(5))
    assert len(a.pairs) == 1
    assert a.pairs[0].mask.max() <= specs[0].num_classes
    assert np.array_equal(a.pairs[0].image, b.pairs[0].image)
    assert np.array_equal(a.pairs[0].mask, b.pairs[0].mask)


def test_frozen_provider_and_history(tiny_run):
    cfg, specs, datasets = tiny_run
    order = [s.task_id for s in specs]
    state = init_schedule_state("CGR", order, specs, cfg, 0)
    tokens = ["low-field scan images", "of concentric rings"]
    before = [state.provider.embed(t).copy() for t in tokens]

    state = run_round(state, datasets[order[0]], cfg, 0)
    adapter_snapshot = copy.deepcopy(state.adapters[order[0]].state_dict())
    state = run_round(state, datasets[order[1]], cfg, 0)

    after = [state.provider.embed(t) for t in tokens]
    for b, a in zip(before, after):
        assert np.array_equal(b, a)
    for key, value in state.adapters[order[0]].state_dict().items():
        assert torch.equal(value, adapter_snapshot[key]), f"adapter drifted at {key}"


def test_replay_zero_equals_finetune(tiny_run):
    cfg, specs, datasets = tiny_run
    import dataclasses

    cfg0 = dataclasses.replace(cfg, replay=ReplayConfig(replay_count=0, ddim_steps=4))
    order = [s.task_id for s in specs]
    res_cgr = run_schedule(order, "CGR", cfg0, 0, specs=specs, datasets=datasets)
    res_ft = run_schedule(order, "FineTune", cfg0, 0, specs=specs, datasets=datasets)
    sd_cgr = res_cgr.state.segmenter.state_dict()
    sd_ft = res_ft.state.segmenter.state_dict()
    assert sd_cgr.keys() == sd_ft.keys()
    for key in sd_cgr:
        assert torch.equal(sd_cgr[key], sd_ft[key]), f"segmenter differs at {key}"


def test_single_task_methods_agree():
    from segreplay.taskgen import DEFAULT_TASKS

    cfg = tiny_config(suite=SuiteConfig(image_size=16, samples_per_task=12,
                                        tasks=[DEFAULT_TASKS[2]]))
    results = {}
    for method in ("CGR", "CGR-BJD", "CGR-TOA", "FineTune", "JointTrain"):
        res = run_schedule([1], method, cfg, seed=3)
        results[method] = res.metrics[1]
    base = results["FineTune"]
    for method, metrics in results.items():
        assert metrics.dice_mean == pytest.approx(base.dice_mean, abs=1e-6), method
        if np.isnan(base.hd95):
            assert np.isnan(metrics.hd95), method
        else:
            assert metrics.hd95 == pytest.approx(base.hd95, abs=1e-6), method


def test_run_schedule_rejects_bad_inputs(tiny_run):
    cfg, specs, datasets = tiny_run
    with pytest.raises(ConfigurationError):
        run_schedule([1, 2, 3], "Distill", cfg, 0, specs=specs, datasets=datasets)
    with pytest.raises(ConfigurationError):
        run_schedule([1, 2], "CGR", cfg, 0, specs=specs, datasets=datasets)
