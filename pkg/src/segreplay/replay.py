"""Sequential training with generative replay.

Each learning round sees only the current task's real data. Stand-in data for
past tasks is synthesized from the generator checkpoint left by the previous
round, mixed into segmenter training (memory evoking), and folded back into
generator training (memory updating) so the generator also absorbs the current
task for future rounds. Method variants swap the generator loss, drop the
prompt adapters, or skip replay entirely; the offline pooled-data baseline
trains once over all tasks with the same total step budget.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .adapter import HashedEmbeddingProvider, embed_prompt, init_adapter, recalibrate, render_prompt
from .config import METHODS, ExperimentConfig
from .denoiser import DenoiserNet, init_denoiser
from .diffusion import (
    JointState,
    ModulatedDenoiser,
    ddim_sample,
    loss_bj,
    loss_nj,
    make_schedule,
    state_from_pair,
    state_to_pair,
)
from .errors import ConfigurationError, StateError
from .rng import derive_seed, numpy_stream, torch_stream
from .segmenter import Metrics, SegmenterNet, evaluate_dataset, init_segmenter, seg_loss
from .taskgen import (
    SuiteConfig,
    TaskDataset,
    TaskSpec,
    build_suite_datasets,
    exclusive_task_access,
    make_task_suite,
)


@dataclass
class ReplaySet:
    task_id: int
    pairs: list
    provenance: dict


@dataclass
class ScheduleState:
    method: str
    order: list  # task ids in learning order
    specs: dict  # task_id -> TaskSpec
    round: int  # next round to run, 1-based
    segmenter: SegmenterNet
    generator: "DenoiserNet | None"
    adapters: dict = field(default_factory=dict)  # task_id -> TaskAdapter (frozen once done)
    replay_sets: dict = field(default_factory=dict)
    provider: HashedEmbeddingProvider = None
    generator_tag: str = "round0"


def uses_generator(method: str) -> bool:
    return method in ("CGR", "CGR-BJD", "CGR-TOA")


def uses_adapters(method: str) -> bool:
    return method in ("CGR", "CGR-BJD")


def init_schedule_state(method: str, order, specs, cfg: ExperimentConfig, seed: int) -> ScheduleState:
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    segmenter = init_segmenter(cfg.segmenter, torch_stream(seed, "seg", "trunk"))
    generator = None
    if uses_generator(method):
        generator = init_denoiser(cfg.denoiser, torch_stream(seed, "gen", "init"))
    return ScheduleState(
        method=method,
        order=list(order),
        specs={s.task_id: s for s in specs},
        round=1,
        segmenter=segmenter,
        generator=generator,
        provider=HashedEmbeddingProvider(cfg.adapter.dim),
    )


def prompt_tokens(state: ScheduleState, task_id: int) -> "torch.Tensor | None":
    """Recalibrated prompt embedding for a task; raw embedding when the method
    runs without adapters; None when the method has no generator at all."""
    if not uses_generator(state.method):
        return None
    spec = state.specs[task_id]
    e = embed_prompt(state.provider, render_prompt(spec), task_id)
    adapter = state.adapters.get(task_id)
    if uses_adapters(state.method) and adapter is not None:
        return recalibrate(adapter, e).tokens
    return e.tokens


def _draw(pool, rng: np.random.Generator, size: int):
    idx = rng.integers(0, len(pool), size=size)
    return [pool[int(i)] for i in idx]


def _replay_stats(pairs, num_classes: int) -> dict:
    if not pairs:
        return {"mean_intensity": None, "class_fractions": None, "complete_fraction": None}
    images = np.stack([p.image for p in pairs])
    masks = np.stack([p.mask for p in pairs])
    fractions = [float((masks == c).mean()) for c in range(num_classes + 1)]
    complete = float(
        np.mean([all((m == c).any() for c in range(1, num_classes + 1)) for m in masks])
    )
    return {
        "mean_intensity": float(images.mean()),
        "class_fractions": fractions,
        "complete_fraction": complete,
    }


def synthesize_replay(state: ScheduleState, task_id: int, cfg: ExperimentConfig,
                      rng: torch.Generator) -> ReplaySet:
    """Sample a stand-in dataset for one past task from the current generator."""
    position = state.order.index(task_id) + 1 if task_id in state.order else None
    if position is None or position >= state.round:
        raise StateError(f"task {task_id} is not a past task at round {state.round}")
    if state.generator is None:
        raise StateError(f"method {state.method} has no generator to replay from")
    if uses_adapters(state.method) and task_id not in state.adapters:
        raise StateError(f"no adapter for past task {task_id}")

    spec = state.specs[task_id]
    sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
    shape = (1 + cfg.denoiser.c_max, spec.image_size, spec.image_size)
    with torch.no_grad():
        w = prompt_tokens(state, task_id)
        w = w.detach() if w is not None else None
    pairs = []
    remaining = cfg.replay.replay_count
    while remaining > 0:
        chunk = min(remaining, 128)
        states = ddim_sample(
            state.generator, sched, cfg.replay.ddim_steps, w, rng, chunk, shape, task_id
        )
        pairs.extend(state_to_pair(s, spec.num_classes) for s in states)
        remaining -= chunk
    for pair in pairs:
        assert pair.mask.max() <= spec.num_classes
    return ReplaySet(
        task_id=task_id,
        pairs=pairs,
        provenance={
            "ddim_steps": cfg.replay.ddim_steps,
            "sample_count": len(pairs),
            "generator_checkpoint_id": state.generator_tag,
            "stats": _replay_stats(pairs, spec.num_classes),
        },
    )


def memory_evoke_loss(segmenter: SegmenterNet, current_batch, replay_batches: dict,
                      alpha: float, loss_fn=seg_loss):
    """Segmentation loss on current data plus alpha-weighted replay losses."""
    if not current_batch:
        raise ValueError("empty current batch")
    current_task = current_batch[0].task_id
    if current_task in replay_batches:
        raise ValueError(f"replay batch supplied for the current task {current_task}")
    total = loss_fn(segmenter, current_batch)
    for task_id in sorted(replay_batches):
        total = total + alpha * loss_fn(segmenter, replay_batches[task_id])
    return total


def _ensure_states(batch, c_max: int):
    if batch and isinstance(batch[0], JointState):
        return batch
    return [state_from_pair(pair, c_max) for pair in batch]


def memory_update_loss(net, current_batch, replay_batches: dict, schedule, prompts: dict,
                       beta: float, rng: torch.Generator, loss_fn=loss_bj, c_max=None):
    """Generator loss on current data plus beta-weighted replay losses, each
    conditioned on its own task's prompt embedding."""
    if not current_batch:
        raise ValueError("empty current batch")
    if c_max is None:
        c_max = net.arch.c_max
    current = _ensure_states(current_batch, c_max)
    current_task = current[0].task_id
    if current_task in replay_batches:
        raise ValueError(f"replay batch supplied for the current task {current_task}")
    total = loss_fn(ModulatedDenoiser(net, prompts.get(current_task)), current, schedule, rng)
    for task_id in sorted(replay_batches):
        states = _ensure_states(replay_batches[task_id], c_max)
        term = loss_fn(ModulatedDenoiser(net, prompts.get(task_id)), states, schedule, rng)
        total = total + beta * term
    return total


def run_round(state: ScheduleState, dataset: TaskDataset, cfg: ExperimentConfig,
              seed: int) -> ScheduleState:
    """One learning round: synthesize replay, train the segmenter, then update
    the generator (and this round's adapter) on current plus replayed data."""
    t = state.round
    if state.method == "JointTrain":
        raise StateError("the pooled-data baseline does not run incremental rounds")
    if t > len(state.order):
        raise StateError(f"schedule already finished after {len(state.order)} rounds")
    task = state.order[t - 1]
    if dataset.task_id != task:
        raise StateError(f"round {t} expects task {task}, got dataset for {dataset.task_id}")
    spec = state.specs[task]
    budgets = cfg.budgets

    with exclusive_task_access(task):
        replay_sets = {}
        if uses_generator(state.method):
            for past in state.order[: t - 1]:
                replay_sets[past] = synthesize_replay(
                    state, past, cfg, torch_stream(seed, "round", t, "sample", past)
                )
        state.replay_sets = replay_sets

        # segmenter: memory evoking
        if not state.segmenter.has_head(task):
            state.segmenter.add_head(task, spec.num_classes, torch_stream(seed, "seg", "head", task))
        opt = torch.optim.Adam(state.segmenter.parameters(), lr=budgets.seg_lr)
        cur_rng = numpy_stream(seed, "round", t, "seg", "current")
        rep_rngs = {i: numpy_stream(seed, "round", t, "seg", "replay", i) for i in replay_sets}
        train = dataset.train
        for _ in range(budgets.seg_steps):
            batch = _draw(train, cur_rng, budgets.seg_batch)
            replay_batches = {
                i: _draw(replay_sets[i].pairs, rep_rngs[i], budgets.seg_batch)
                for i in sorted(replay_sets)
                if replay_sets[i].pairs
            }
            loss = memory_evoke_loss(state.segmenter, batch, replay_batches, cfg.replay.alpha)
            opt.zero_grad()
            loss.backward()
            opt.step()

        # generator: memory updating
        if uses_generator(state.method):
            sched = make_schedule(cfg.diffusion.steps, cfg.diffusion.beta_min, cfg.diffusion.beta_max)
            params = list(state.generator.parameters())
            if uses_adapters(state.method):
                adapter = init_adapter(task, cfg.adapter, torch_stream(seed, "adapter", task))
                state.adapters[task] = adapter
                params += list(adapter.parameters())
            gopt = torch.optim.AdamW(params, lr=budgets.gen_lr)
            c_max = cfg.denoiser.c_max
            cur_states = [state_from_pair(p, c_max) for p in train]
            rep_states = {
                i: [state_from_pair(p, c_max) for p in replay_sets[i].pairs]
                for i in sorted(replay_sets)
                if replay_sets[i].pairs
            }
            gcur_rng = numpy_stream(seed, "round", t, "gen", "current")
            grep_rngs = {i: numpy_stream(seed, "round", t, "gen", "replay", i) for i in rep_states}
            draws_rng = torch_stream(seed, "round", t, "gen", "draws")
            loss_fn = loss_nj if state.method == "CGR-BJD" else loss_bj
            for _ in range(budgets.gen_steps):
                cur_batch = _draw(cur_states, gcur_rng, budgets.gen_batch)
                replay_batches = {
                    i: _draw(rep_states[i], grep_rngs[i], budgets.gen_batch) for i in sorted(rep_states)
                }
                prompts = {i: prompt_tokens(state, i) for i in [task, *replay_batches]}
                loss = memory_update_loss(
                    state.generator, cur_batch, replay_batches, sched, prompts,
                    cfg.replay.beta, draws_rng, loss_fn=loss_fn,
                )
                gopt.zero_grad()
                loss.backward()
                gopt.step()
            if uses_adapters(state.method):
                state.adapters[task].requires_grad_(False)

    state.round = t + 1
    state.generator_tag = f"round{t}"
    return state


def _run_joint(order, specs, datasets, cfg: ExperimentConfig, seed: int) -> ScheduleState:
    """Offline upper bound: pooled training over all tasks, one batch per step
    cycling through the order, with the same total step budget as a full
    incremental schedule."""
    state = init_schedule_state("JointTrain", order, specs, cfg, seed)
    for task in order:
        state.segmenter.add_head(
            task, state.specs[task].num_classes, torch_stream(seed, "seg", "head", task)
        )
    opt = torch.optim.Adam(state.segmenter.parameters(), lr=cfg.budgets.seg_lr)
    streams = {
        pos: numpy_stream(seed, "round", pos, "seg", "current") for pos in range(1, len(order) + 1)
    }
    total_steps = cfg.budgets.seg_steps * len(order)
    for step in range(total_steps):
        pos = step % len(order) + 1
        task = order[pos - 1]
        batch = _draw(datasets[task].train, streams[pos], cfg.budgets.seg_batch)
        loss = seg_loss(state.segmenter, batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
    state.round = len(order) + 1
    return state


@dataclass
class ScheduleResult:
    method: str
    order: list
    seed: int
    metrics: dict  # task_id -> Metrics
    state: ScheduleState


def evaluate_state(state: ScheduleState, datasets: dict) -> dict:
    """Test-split metrics for every task the segmenter has a head for."""
    results = {}
    for task in state.order:
        if state.segmenter.has_head(task):
            results[task] = evaluate_dataset(
                state.segmenter, datasets[task].test, state.specs[task].num_classes
            )
    return results


def suite_for_seed(cfg: ExperimentConfig, seed: int):
    """Suite specs and datasets for one run; data depends on the run seed."""
    import dataclasses as _dc

    suite_cfg = _dc.replace(cfg.suite, base_seed=derive_seed(seed, "taskgen"))
    specs = make_task_suite(suite_cfg)
    datasets = build_suite_datasets(
        specs, suite_cfg.samples_per_task, tuple(suite_cfg.fractions)
    )
    return specs, datasets


def run_schedule(order, method: str, cfg: ExperimentConfig, seed: int, specs=None,
                 datasets=None, resume_state=None, round_hook=None) -> ScheduleResult:
    """Execute a full learning schedule and evaluate every task's test split.

    `order` is a list of task ids. `round_hook(state)` fires after each round
    (checkpointing seam). `resume_state` continues a partially completed run.
    """
    if method not in METHODS:
        raise ConfigurationError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    if specs is None or datasets is None:
        specs, datasets = suite_for_seed(cfg, seed)
    order = list(order)
    if sorted(order) != sorted(s.task_id for s in specs):
        raise ConfigurationError(f"order {order} is not a permutation of suite task ids")

    if method == "JointTrain":
        state = _run_joint(order, specs, datasets, cfg, seed)
        if round_hook:
            round_hook(state)
    else:
        state = resume_state if resume_state is not None else init_schedule_state(
            method, order, specs, cfg, seed
        )
        while state.round <= len(order):
            dataset = datasets[order[state.round - 1]]
            state = run_round(state, dataset, cfg, seed)
            if round_hook:
                round_hook(state)

    return ScheduleResult(
        method=method,
        order=order,
        seed=seed,
        metrics=evaluate_state(state, datasets),
        state=state,
    )
