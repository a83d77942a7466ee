import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from backward import DensityTable, FeedbackBuffer, apply_report, backward_pass, critique_feedback
from batch_runner import BatchRunner
from exceptions import BackendError, DatasetError, TagsNotFound
from forward import run_forward
from graph import validate_graph
from models import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EVAL_TIME,
    DEFAULT_MAX_CONCURRENCY,
    DEFAULT_MODEL,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    DEFAULT_TAU,
    DEFAULT_TEST_REPEATS,
    DEFAULT_UPDATE_FREQ,
    OPTIMIZER_MAX_TOKENS,
    OPTIMIZER_TEMPERATURE,
    PROJECTOR_TEMPERATURE,
    RoutingMode,
    SchedulerStrategy,
    StepAction,
    TruncationPolicy,
)
from optimizer import build_update_prompt, extract_new_prompt
from run_log import save_best_prompts
from scheduler import SchedulerState, select_component

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = DEFAULT_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    update_freq: int = DEFAULT_UPDATE_FREQ
    eval_time: int = DEFAULT_EVAL_TIME
    test_repeats: int = DEFAULT_TEST_REPEATS
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY
    seed: int = DEFAULT_SEED
    strategy: SchedulerStrategy = SchedulerStrategy.DENSITY_BOLTZMANN
    tau: float = DEFAULT_TAU
    projector_model: str = DEFAULT_MODEL
    projector_temperature: float = PROJECTOR_TEMPERATURE
    optimizer_model: str = DEFAULT_MODEL
    optimizer_temperature: float = OPTIMIZER_TEMPERATURE
    optimizer_max_tokens: int = OPTIMIZER_MAX_TOKENS
    routing: RoutingMode = RoutingMode.ROUTED

    def __post_init__(self):
        for name in ("steps", "batch_size", "update_freq", "eval_time", "test_repeats",
                     "max_concurrency", "optimizer_max_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        object.__setattr__(self, "strategy", SchedulerStrategy(self.strategy))
        object.__setattr__(self, "routing", RoutingMode(self.routing))


@dataclass
class EvalResult:
    mean: float
    trial_means: list
    per_example: list
    failures: list = field(default_factory=list)


@dataclass
class StepRecord:
    step: int
    action: StepAction
    selected: Optional[str]
    dev_score: Optional[float]
    dev_evaluated: bool
    train_reward: float
    rho: dict
    stop_events: int
    feedback_tokens: int
    projector_calls: int
    prompt_versions: dict
    new_prompt: Optional[str] = None
    forward_failures: int = 0
    backward_failures: int = 0
    fan_in_events: int = 0

    def to_dict(self):
        return {
            "step": self.step,
            "action": self.action.value,
            "selected": self.selected,
            "dev_score": self.dev_score,
            "dev_evaluated": self.dev_evaluated,
            "train_reward": self.train_reward,
            "rho": dict(self.rho),
            "stop_events": self.stop_events,
            "feedback_tokens": self.feedback_tokens,
            "projector_calls": self.projector_calls,
            "prompt_versions": dict(self.prompt_versions),
            "new_prompt": self.new_prompt,
            "forward_failures": self.forward_failures,
            "backward_failures": self.backward_failures,
            "fan_in_events": self.fan_in_events,
        }


@dataclass
class TrainHistory:
    baseline_score: float
    steps: list = field(default_factory=list)
    best_prompts: dict = field(default_factory=dict)
    best_dev_score: float = 0.0
    best_step: int = 0
    final_prompts: dict = field(default_factory=dict)

    def dev_scores(self):
        return [self.baseline_score] + [r.dev_score for r in self.steps if r.dev_evaluated]


def evaluate(graph, dataset, repeats, backend, max_concurrency=DEFAULT_MAX_CONCURRENCY, policy=None, tools=None):
    """Mean reward over repeats x examples; failing examples score 0 and are flagged"""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    dataset = list(dataset)
    if not dataset:
        raise DatasetError("cannot evaluate an empty dataset")

    jobs = [(trial, index) for trial in range(repeats) for index in range(len(dataset))]

    def score(job):
        _, index = job
        example = dataset[index]
        if example.gold is None:
            raise DatasetError(f"example {index} has no gold record")
        return run_forward(graph, example.input, backend, policy, example.gold, tools).reward or 0.0

    outcomes = BatchRunner(max_concurrency, name="Eval").run(score, jobs)
    scores = np.zeros((repeats, len(dataset)))
    failures = []
    for (trial, index), outcome in zip(jobs, outcomes):
        if outcome.ok:
            scores[trial, index] = outcome.value
        else:
            failures.append({"trial": trial, "example": index, "error": str(outcome.error)})

    return EvalResult(
        mean=float(scores.mean()),
        trial_means=[float(m) for m in scores.mean(axis=1)],
        per_example=[float(m) for m in scores.mean(axis=0)],
        failures=failures,
    )


def sample_batch(dataset_size, batch_size, seed, step):
    """Per-step batch drawn from a generator seeded by (seed, step)"""
    rng = np.random.default_rng([seed, step])
    replace = batch_size > dataset_size
    return [int(i) for i in rng.choice(dataset_size, size=batch_size, replace=replace)]


def run_training(graph, train_set, dev_set, config, forward_backend, projector_backend, optimizer_backend,
                 policy=None, tools=None, run_log=None, checkpoint_path=None):
    """Forward, route feedback backward, pick one node by density and rewrite its prompt"""
    report = validate_graph(graph)
    if not report.ok:
        raise ValueError(f"Graph is not runnable: {[v.message for v in report.violations]}")
    train_set, dev_set = list(train_set), list(dev_set)
    if not train_set or not dev_set:
        raise DatasetError("training and dev sets must be non-empty")

    policy = policy or TruncationPolicy()
    runner = BatchRunner(config.max_concurrency, name="Train")
    optimizable = graph.optimizable_ids()
    densities = DensityTable(optimizable)
    buffers = FeedbackBuffer(optimizable)
    state = SchedulerState(strategy=config.strategy, tau=config.tau, rng_seed=config.seed)
    versions = {cid: 0 for cid in optimizable}

    def dev_score(current):
        return evaluate(current, dev_set, config.eval_time, forward_backend,
                        config.max_concurrency, policy, tools).mean

    baseline = dev_score(graph)
    history = TrainHistory(baseline_score=baseline, best_prompts=graph.prompts(),
                           best_dev_score=baseline, best_step=0)
    last_dev = baseline
    logger.info(f"Training started: {config.steps} steps, K={config.batch_size}, baseline dev {baseline:.4f}")
    if run_log is not None:
        run_log.emit("run_start", baseline=baseline, prompts=graph.prompts(), seed=config.seed)

    for step in range(1, config.steps + 1):
        batch = [train_set[i] for i in sample_batch(len(train_set), config.batch_size, config.seed, step)]

        current = graph
        forward_outcomes = runner.run(
            lambda ex: run_forward(current, ex.input, forward_backend, policy, ex.gold, tools), batch
        )

        rewards = []
        backward_jobs = []
        forward_failures = 0
        for index, (example, outcome) in enumerate(zip(batch, forward_outcomes)):
            if not outcome.ok:
                forward_failures += 1
                rewards.append(0.0)
                if run_log is not None:
                    run_log.emit("error", step=step, example=index, stage="forward", detail=str(outcome.error))
                continue
            result = outcome.value
            reward = result.reward if result.reward is not None else 0.0
            rewards.append(reward)
            if example.gold is not None and reward < 1.0:
                backward_jobs.append((index, example, result))

        def run_backward(job):
            index, example, result = job
            objective = critique_feedback(result.final_context, example.gold, result.reward)
            return backward_pass(current, result.trajectory, objective, projector_backend,
                                 step=step, example=index, model=config.projector_model,
                                 temperature=config.projector_temperature, routing=config.routing,
                                 target_field=example.gold.field_name)

        backward_outcomes = runner.run(run_backward, backward_jobs)

        stop_events = feedback_tokens = projector_calls = backward_failures = fan_in = 0
        for (index, _, _), outcome in zip(backward_jobs, backward_outcomes):
            if outcome.ok:
                step_report = outcome.value
            else:
                backward_failures += 1
                step_report = getattr(outcome.error, "report", None)
                if run_log is not None:
                    run_log.emit("error", step=step, example=index, stage="backward", detail=str(outcome.error))
                if step_report is None:
                    continue
            apply_report(step_report, densities, buffers)
            stop_events += step_report.stop_events
            feedback_tokens += step_report.feedback_tokens
            projector_calls += step_report.projector_calls
            fan_in += len(step_report.fan_in)
            if run_log is not None:
                for record in step_report.records:
                    run_log.emit("routing", **record.to_dict())

        action, selected, new_prompt, evaluated = StepAction.SKIPPED, None, None, False
        if step % config.update_freq == 0:
            action = StepAction.NO_OP
            if densities.any_positive():
                selected = select_component(state, densities, optimizable)
                action, new_prompt = _update_component(
                    graph, selected, buffers, optimizer_backend, config
                )

        if action is StepAction.UPDATE:
            graph = graph.with_prompt(selected, new_prompt)
            densities.reset(selected, step)
            buffers.clear(selected)
            versions[selected] += 1
            logger.info(f"Step {step}: installed prompt v{versions[selected]} for {selected}")
            if run_log is not None:
                run_log.emit("prompt_change", step=step, component=selected,
                             version=versions[selected], prompt_text=new_prompt)
            last_dev = dev_score(graph)
            evaluated = True
            if last_dev > history.best_dev_score:
                history.best_dev_score = last_dev
                history.best_prompts = graph.prompts()
                history.best_step = step
            if checkpoint_path is not None:
                save_best_prompts(checkpoint_path, history.best_prompts, history.best_dev_score,
                                  history.best_step)

        record = StepRecord(
            step=step,
            action=action,
            selected=selected,
            dev_score=last_dev,
            dev_evaluated=evaluated,
            train_reward=float(np.mean(rewards)) if rewards else 0.0,
            rho=densities.snapshot(),
            stop_events=stop_events,
            feedback_tokens=feedback_tokens,
            projector_calls=projector_calls,
            prompt_versions=dict(versions),
            new_prompt=new_prompt if action is StepAction.UPDATE else None,
            forward_failures=forward_failures,
            backward_failures=backward_failures,
            fan_in_events=fan_in,
        )
        history.steps.append(record)
        if run_log is not None:
            run_log.emit("tokens", step=step, feedback_tokens=feedback_tokens, stop_events=stop_events)
            run_log.emit("step", **record.to_dict())
        logger.info(f"Step {step}/{config.steps}: {action.value} "
                    f"selected={selected} dev={last_dev:.4f} stops={stop_events}")

    history.final_prompts = graph.prompts()
    if run_log is not None:
        run_log.emit("run_end", best_dev_score=history.best_dev_score, best_step=history.best_step)
    return history


def _update_component(graph, component_id, buffers, optimizer_backend, config):
    entries = buffers.entries(component_id)
    if not entries:
        logger.info(f"Selected {component_id} has no buffered feedback, skipping update")
        return StepAction.EMPTY_BUFFER, None

    request = build_update_prompt(
        graph.component(component_id), entries, model=config.optimizer_model,
        temperature=config.optimizer_temperature, max_new_tokens=config.optimizer_max_tokens,
    )
    try:
        response = optimizer_backend.complete(request)
        return StepAction.UPDATE, extract_new_prompt(response.text)
    except TagsNotFound:
        logger.warning(f"Optimizer output for {component_id} has no prompt tags, keeping old prompt")
        return StepAction.TAGS_NOT_FOUND, None
    except BackendError as e:
        logger.error(f"Optimizer call for {component_id} failed: {e.detail}")
        return StepAction.OPTIMIZER_FAILED, None
    except Exception as e:
        logger.exception(f"Unexpected optimizer failure for {component_id}: {e}")
        return StepAction.OPTIMIZER_FAILED, None


def compare_schedulers(graph, train_set, dev_set, config, make_backends, strategies=None, **kwargs):
    """Run the loop once per scheduling strategy on fresh backends; returns {strategy: history}"""
    strategies = strategies or list(SchedulerStrategy)
    results = {}
    for strategy in strategies:
        forward_backend, projector_backend, optimizer_backend = make_backends()
        variant = TrainConfig(**{**config.__dict__, "strategy": SchedulerStrategy(strategy)})
        results[SchedulerStrategy(strategy)] = run_training(
            graph, train_set, dev_set, variant, forward_backend, projector_backend, optimizer_backend, **kwargs
        )
        logger.info(f"Scheduler {SchedulerStrategy(strategy).value}: best dev "
                    f"{results[SchedulerStrategy(strategy)].best_dev_score:.4f}")
    return results


DEFAULT_VARIANTS = {
    "full": {"strategy": SchedulerStrategy.DENSITY_BOLTZMANN, "routing": RoutingMode.ROUTED},
    "unrouted": {"strategy": SchedulerStrategy.DENSITY_BOLTZMANN, "routing": RoutingMode.UNROUTED},
    "random": {"strategy": SchedulerStrategy.RANDOM, "routing": RoutingMode.ROUTED},
}


def compare_variants(graph, train_set, dev_set, config, make_backends, variants=None, **kwargs):
    """Ablation runs: each variant overrides TrainConfig fields; returns {name: history}"""
    variants = variants or DEFAULT_VARIANTS
    results = {}
    for name, overrides in variants.items():
        forward_backend, projector_backend, optimizer_backend = make_backends()
        variant = TrainConfig(**{**config.__dict__, **overrides})
        results[name] = run_training(
            graph, train_set, dev_set, variant, forward_backend, projector_backend, optimizer_backend, **kwargs
        )
        logger.info(f"Variant {name} ({variant.strategy.value}, {variant.routing.value}): "
                    f"best dev {results[name].best_dev_score:.4f}")
    return results
