import pandas as pd
import pytest

from conftest import EMPTY_STOP, LOCAL_STOP, chain_graph, example, scripted
from config import load_config
from datasets import load_dataset
from exceptions import BackendError, DatasetError
from graph import load_graph
from llm_backend import CountingBackend, ScriptRule, build_backend
from models import Context, Example, RoutingMode, SchedulerStrategy, StepAction
from run_log import TOKENS_FILE, export_metrics, load_best_prompts
from trainer import TrainConfig, compare_schedulers, compare_variants, evaluate, run_training, sample_batch

GOOD_PROMPT = "Answer with exactly one word: yes or no."


def scenario(defective_dir):
    config = load_config(defective_dir / "config.json")
    graph = load_graph(config.graph)
    return config, graph, load_dataset(config.train), load_dataset(config.dev)


def scenario_backends(config):
    return tuple(CountingBackend(build_backend(s)) for s in config.backend_settings())


def yes_examples(n):
    return [example(f"question {i}?", "yes") for i in range(n)]


def test_defective_node_is_repaired(defective_dir):
    config, graph, train, dev = scenario(defective_dir)
    forward, projector, optimizer = scenario_backends(config)
    history = run_training(graph, train, dev, config.train_config(), forward, projector, optimizer)

    assert history.baseline_score == 0.0
    first_perfect = next(r.step for r in history.steps if r.dev_score == 1.0)
    assert first_perfect <= 10
    assert history.steps[-1].dev_score == 1.0
    assert history.best_dev_score == 1.0
    assert history.best_prompts["answerer"] == GOOD_PROMPT

    rewriter_prompt = graph.component("rewriter").prompt_text
    assert history.final_prompts["rewriter"] == rewriter_prompt
    assert all(r.prompt_versions["rewriter"] == 0 for r in history.steps)

    updates = [r for r in history.steps if r.action is StepAction.UPDATE]
    assert [r.selected for r in updates] == ["answerer"]
    assert updates[0].rho["answerer"] == 0
    assert optimizer.calls == 1
    assert all("Restates the user question." not in r.user for r in projector.requests)


def test_buffer_is_cleared_after_update(defective_dir):
    config, graph, train, dev = scenario(defective_dir)
    forward = scripted([("Restate the question in one sentence.", "restated")], fallback="maybe")
    projector = scripted([("Produces the final yes/no verdict.", LOCAL_STOP.format(local="be decisive"))],
                         fallback=EMPTY_STOP)
    optimizer = CountingBackend(scripted([], fallback="<IMPROVED_PROMPT>Still vague.</IMPROVED_PROMPT>"))
    cfg = TrainConfig(steps=3, batch_size=4, eval_time=1, max_concurrency=1, strategy="greedy")

    history = run_training(graph, train, dev, cfg, forward, projector, optimizer)

    assert [r.action for r in history.steps] == [StepAction.UPDATE] * 3
    assert all(r.rho == {"rewriter": 0, "answerer": 0} for r in history.steps)
    for step, request in enumerate(optimizer.requests, start=1):
        assert f"Feedback 4 (step {step})" in request.user
        assert "Feedback 5" not in request.user
    assert [r.prompt_versions["answerer"] for r in history.steps] == [1, 2, 3]


def test_perfect_score_skips_feedback():
    graph = chain_graph(1)
    forward = scripted([], fallback="yes")
    projector = CountingBackend(scripted([], fallback=LOCAL_STOP.format(local="x")))
    optimizer = CountingBackend(scripted([], fallback="<IMPROVED_PROMPT>p</IMPROVED_PROMPT>"))
    history = run_training(graph, yes_examples(1), yes_examples(1), TrainConfig(steps=1, batch_size=1),
                           forward, projector, optimizer)
    assert projector.calls == 0
    assert optimizer.calls == 0
    assert history.steps[0].action is StepAction.NO_OP
    assert history.steps[0].train_reward == 1.0


def test_zero_density_is_a_no_op():
    graph = chain_graph(2)
    projector = scripted([], fallback=EMPTY_STOP)
    optimizer = CountingBackend(scripted([], fallback="<IMPROVED_PROMPT>p</IMPROVED_PROMPT>"))
    history = run_training(graph, yes_examples(3), yes_examples(2), TrainConfig(steps=2, batch_size=3),
                           scripted([], fallback="no"), projector, optimizer)
    assert [r.action for r in history.steps] == [StepAction.NO_OP, StepAction.NO_OP]
    assert optimizer.calls == 0
    assert history.steps[0].stop_events == 3
    assert all(not r.dev_evaluated for r in history.steps)
    assert history.steps[-1].dev_score == history.baseline_score


def test_update_frequency_gates_updates():
    graph = chain_graph(1)
    projector = scripted([], fallback=LOCAL_STOP.format(local="fix"))
    optimizer = scripted([], fallback="<IMPROVED_PROMPT>p</IMPROVED_PROMPT>")
    history = run_training(graph, yes_examples(2), yes_examples(2),
                           TrainConfig(steps=4, batch_size=2, update_freq=2),
                           scripted([], fallback="no"), projector, optimizer)
    assert [r.action for r in history.steps] == [
        StepAction.SKIPPED, StepAction.UPDATE, StepAction.SKIPPED, StepAction.UPDATE,
    ]
    assert history.steps[0].rho == {"n1": 2}
    assert history.steps[1].rho == {"n1": 0}


def test_missing_tags_keep_prompt_and_density():
    graph = chain_graph(1)
    projector = scripted([], fallback=LOCAL_STOP.format(local="fix"))
    optimizer = scripted([], fallback="I would rather not rewrite it.")
    history = run_training(graph, yes_examples(2), yes_examples(2), TrainConfig(steps=2, batch_size=2),
                           scripted([], fallback="no"), projector, optimizer)
    assert [r.action for r in history.steps] == [StepAction.TAGS_NOT_FOUND] * 2
    assert history.steps[-1].rho == {"n1": 4}
    assert history.final_prompts == graph.prompts()


def test_optimizer_failure_is_recorded():
    class Down:
        def complete(self, request):
            raise BackendError("optimizer unavailable")

    graph = chain_graph(1)
    projector = scripted([], fallback=LOCAL_STOP.format(local="fix"))
    history = run_training(graph, yes_examples(2), yes_examples(2), TrainConfig(steps=1, batch_size=2),
                           scripted([], fallback="no"), projector, Down())
    assert history.steps[0].action is StepAction.OPTIMIZER_FAILED
    assert history.steps[0].rho == {"n1": 2}


def test_selected_node_without_feedback():
    graph = chain_graph(2)
    projector = scripted([("Role of n2.", LOCAL_STOP.format(local="fix n2"))], fallback=EMPTY_STOP)
    optimizer = scripted([], fallback="<IMPROVED_PROMPT>p</IMPROVED_PROMPT>")
    history = run_training(graph, yes_examples(2), yes_examples(2),
                           TrainConfig(steps=2, batch_size=2, strategy=SchedulerStrategy.ROUND_ROBIN),
                           scripted([], fallback="no"), projector, optimizer)
    assert [(r.action, r.selected) for r in history.steps] == [
        (StepAction.EMPTY_BUFFER, "n1"), (StepAction.UPDATE, "n2"),
    ]


def test_forward_failures_score_zero():
    class Flaky:
        def complete(self, request):
            if "question 0?" in request.user:
                raise BackendError("bad gateway")
            return scripted([], fallback="yes").complete(request)

    graph = chain_graph(1)
    projector = CountingBackend(scripted([], fallback=EMPTY_STOP))
    history = run_training(graph, yes_examples(2), yes_examples(2), TrainConfig(steps=1, batch_size=2, seed=3),
                           Flaky(), projector, scripted([]))
    step = history.steps[0]
    assert step.forward_failures == 1
    assert step.train_reward == 0.5
    assert projector.calls == 0
    assert history.baseline_score == 0.5


def test_stop_rate_shrinks_feedback_volume(tmp_path):
    steps, k = 20, 4
    long_text = "The upstream reasoning drifted away from the question. " * 15

    def final_node(request, n):
        step, index = (n - 1) // k + 1, (n - 1) % k
        if index < round(k * (step - 1) / (steps - 1)):
            return LOCAL_STOP.format(local="tighten")
        return f"LOCAL: tighten\nUPSTREAM: {long_text}"

    projector = scripted([
        ScriptRule(pattern="Role of n2.", responder=final_node),
        ScriptRule(pattern="Role of n1.", response=f"LOCAL: {long_text}\nUPSTREAM: {long_text}"),
    ])
    optimizer = scripted([], fallback="<IMPROVED_PROMPT>Another attempt.</IMPROVED_PROMPT>")
    history = run_training(chain_graph(2), yes_examples(8), yes_examples(2),
                           TrainConfig(steps=steps, batch_size=k, eval_time=1, max_concurrency=1),
                           scripted([], fallback="no"), projector, optimizer)

    export_metrics(history, tmp_path)
    tokens = pd.read_csv(tmp_path / TOKENS_FILE)
    assert list(tokens["step"]) == list(range(1, steps + 1))
    assert tokens["feedback_tokens"].iloc[-1] < 0.25 * tokens["feedback_tokens"].iloc[0]
    assert tokens["stop_events"].is_monotonic_increasing
    assert tokens["stop_events"].iloc[0] == 0
    assert tokens["stop_events"].iloc[-1] == k
    assert tokens["feedback_tokens"].sum() == sum(r.feedback_tokens for r in history.steps)


def test_checkpoint_tracks_best_dev(defective_dir, tmp_path):
    config, graph, train, dev = scenario(defective_dir)
    checkpoint = tmp_path / "best_prompts.json"
    run_training(graph, train, dev, config.train_config(), *scenario_backends(config), checkpoint_path=checkpoint)
    prompts, score = load_best_prompts(checkpoint)
    assert score == 1.0
    assert prompts["answerer"] == GOOD_PROMPT


def test_histories_are_reproducible(defective_dir):
    config, graph, train, dev = scenario(defective_dir)

    def run():
        history = run_training(graph, train, dev, config.train_config(), *scenario_backends(config))
        return [r.to_dict() for r in history.steps]

    assert run() == run()


def test_compare_schedulers(defective_dir):
    config, graph, train, dev = scenario(defective_dir)
    results = compare_schedulers(graph, train, dev, config.train_config(), lambda: scenario_backends(config))
    assert set(results) == set(SchedulerStrategy)
    assert results[SchedulerStrategy.GREEDY].best_dev_score == 1.0
    assert results[SchedulerStrategy.DENSITY_BOLTZMANN].best_dev_score == 1.0


def test_compare_variants(defective_dir):
    config, graph, train, dev = scenario(defective_dir)
    results = compare_variants(graph, train, dev, config.train_config(), lambda: scenario_backends(config))
    assert set(results) == {"full", "unrouted", "random"}
    assert results["full"].best_dev_score == 1.0


def test_unrouted_training_critiques_every_node():
    projector = CountingBackend(scripted([], fallback=LOCAL_STOP.format(local="tighten")))
    optimizer = scripted([], fallback="<IMPROVED_PROMPT>Another attempt.</IMPROVED_PROMPT>")
    cfg = TrainConfig(steps=1, batch_size=1, eval_time=1, max_concurrency=1, update_freq=2, routing="unrouted")
    history = run_training(chain_graph(3), yes_examples(1), yes_examples(1), cfg,
                           scripted([], fallback="no"), projector, optimizer)
    assert projector.calls == 3
    assert history.steps[0].rho == {"n1": 1, "n2": 1, "n3": 1}
    assert history.steps[0].stop_events == 0


def test_evaluate_repeats_are_identical():
    graph = chain_graph(1)
    result = evaluate(graph, yes_examples(3), 3, scripted([], fallback="yes"))
    assert result.trial_means == [1.0, 1.0, 1.0]
    assert result.mean == 1.0


def test_evaluate_mean_and_failures():
    graph = chain_graph(1)
    data = [example("a?", "yes"), example("b?", "no")]
    assert evaluate(graph, data, 1, scripted([], fallback="yes")).per_example == [1.0, 0.0]
    assert evaluate(graph, data, 1, scripted([], fallback="yes")).mean == 0.5

    unlabeled = [Example(input=Context(other="x"))]
    result = evaluate(graph, unlabeled, 2, scripted([], fallback="yes"))
    assert result.mean == 0.0
    assert len(result.failures) == 2


def test_evaluate_flags_unlabeled_examples():
    data = [example("a?", "yes"), Example(input=Context(question="b?"))]
    result = evaluate(chain_graph(1), data, 1, scripted([], fallback="yes"))
    assert result.mean == 0.5
    assert result.per_example == [1.0, 0.0]
    assert len(result.failures) == 1
    assert result.failures[0]["example"] == 1
    assert "no gold record" in result.failures[0]["error"]


def test_evaluate_concurrency_matches_serial():
    graph = chain_graph(2)
    data = [example(f"q{i}", "yes" if i % 3 else "no") for i in range(96)]
    backend = scripted([], fallback="yes")
    serial = evaluate(graph, data, 1, backend, max_concurrency=1)
    parallel = evaluate(graph, data, 1, backend, max_concurrency=20)
    assert serial.mean == parallel.mean
    assert serial.per_example == parallel.per_example


def test_evaluate_rejects_empty():
    with pytest.raises(DatasetError):
        evaluate(chain_graph(1), [], 1, scripted([]))
    with pytest.raises(ValueError):
        evaluate(chain_graph(1), yes_examples(1), 0, scripted([]))


def test_sample_batch():
    assert sample_batch(10, 4, seed=42, step=3) == sample_batch(10, 4, seed=42, step=3)
    assert sample_batch(10, 4, seed=42, step=3) != sample_batch(10, 4, seed=42, step=4)
    drawn = sample_batch(10, 10, seed=42, step=1)
    assert sorted(drawn) == list(range(10))
    assert len(sample_batch(3, 8, seed=42, step=1)) == 8


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(tau=0)
    assert TrainConfig(strategy="greedy").strategy is SchedulerStrategy.GREEDY
    assert TrainConfig(routing="unrouted").routing is RoutingMode.UNROUTED
    assert TrainConfig().routing is RoutingMode.ROUTED
