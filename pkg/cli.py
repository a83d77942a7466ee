import json
import logging
from pathlib import Path

import click

from config import configure_logging, load_config
from datasets import load_dataset, split_dataset
from exceptions import ConfigError, DatasetError, GraphError, ResGradError, SimulationError
from forward import IDENTITY_PREFIX
from graph import load_graph, validate_graph
from llm_backend import ScriptedBackend, build_backend, load_script_table
from noise_sim import NOISE_KINDS, NoiseModelParams, fit_slope, simulate_noise_chain, variance_limit
from run_log import BEST_PROMPTS_FILE, RUN_LOG_FILE, RunLog, export_metrics, load_best_prompts, save_best_prompts
from stub_server import StubServer, create_stub_app
from trainer import evaluate, run_training

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ERROR = 2

_STATUS = {EXIT_OK: "ok", EXIT_INVALID: "invalid", EXIT_ERROR: "error"}


def _finish(code, message=None):
    if message:
        click.echo(message, err=True)
    click.echo(f"RESULT: {_STATUS[code]}", err=True)
    raise SystemExit(code)


def _graph_problems(config, graph):
    """Graph invariant violations plus tool nodes no registry entry can serve"""
    problems = [f"{v.kind}: {v.message}" for v in validate_graph(graph).violations]
    for component in graph.components:
        if component.is_tool and component.id not in config.tools and not component.id.startswith(IDENTITY_PREFIX):
            problems.append(f"unregistered tool: component '{component.id}' has no tool in config.tools")
    return problems


def _load_run_inputs(config_path):
    config = load_config(config_path)
    graph = load_graph(config.graph)
    problems = _graph_problems(config, graph)
    if problems:
        raise ConfigError("; ".join(problems))
    return config, graph


def _handle(fn):
    """Map domain failures onto exit codes: 1 for invalid inputs, 2 for runtime errors"""
    try:
        fn()
    except (ConfigError, DatasetError, GraphError) as e:
        logger.error(f"Invalid input: {e}")
        _finish(EXIT_INVALID, f"error: {e}")
    except (ResGradError, OSError, ValueError) as e:
        logger.error(f"Run failed: {e}")
        _finish(EXIT_ERROR, f"error: {e}")
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        _finish(EXIT_ERROR, f"error: {e}")
    _finish(EXIT_OK)


@click.group()
@click.option("--log-level", default=None, help="Logging level (default: $RESGRAD_LOG_LEVEL or INFO)")
def cli(log_level):
    """Optimize the prompts of a compound AI graph with routed textual feedback."""
    configure_logging(log_level)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="Output directory (default: output_dir from the config)")
def run(config_path, out_dir):
    """Run the training loop; writes history, metrics and best_prompts.json."""

    def body():
        config, graph = _load_run_inputs(config_path)
        train_set = load_dataset(config.train)
        if config.dev is not None:
            dev_set = load_dataset(config.dev)
        else:
            train_set, dev_set = split_dataset(train_set, seed=config.training.seed)
            logger.info(f"No dev set configured, split train into {len(train_set)}/{len(dev_set)}")

        out = Path(out_dir) if out_dir else config.output_dir
        out.mkdir(parents=True, exist_ok=True)
        forward_settings, projector_settings, optimizer_settings = config.backend_settings()
        checkpoint = out / BEST_PROMPTS_FILE

        with RunLog(out / RUN_LOG_FILE) as run_log:
            history = run_training(
                graph, train_set, dev_set, config.train_config(),
                build_backend(forward_settings), build_backend(projector_settings),
                build_backend(optimizer_settings),
                policy=config.truncation_policy(), tools=config.tool_registry(),
                run_log=run_log, checkpoint_path=checkpoint,
            )
        save_best_prompts(checkpoint, history.best_prompts, history.best_dev_score, history.best_step)
        export_metrics(history, out)
        click.echo(json.dumps({
            "baseline_dev_score": history.baseline_score,
            "best_dev_score": history.best_dev_score,
            "best_step": history.best_step,
            "output_dir": str(out),
        }, indent=2))

    _handle(body)


@cli.command(name="evaluate")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--prompts", "prompts_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="best_prompts.json checkpoint to install before scoring")
@click.option("--split", type=click.Choice(["train", "dev", "test"]), default="test", show_default=True)
@click.option("--repeats", type=click.IntRange(min=1), default=None,
              help="Repeated trials (default: test_repeats from the config)")
def evaluate_command(config_path, prompts_path, split, repeats):
    """Score a graph (optionally with checkpointed prompts) on one dataset split."""

    def body():
        config, graph = _load_run_inputs(config_path)
        path = getattr(config, split)
        if path is None:
            raise ConfigError(f"config has no '{split}' dataset")
        if prompts_path is not None:
            prompts, _ = load_best_prompts(prompts_path)
            graph = graph.with_prompts(prompts)

        result = evaluate(
            graph, load_dataset(path), repeats or config.training.test_repeats,
            build_backend(config.backends.forward), config.training.max_concurrency,
            config.truncation_policy(), config.tool_registry(),
        )
        click.echo(json.dumps({
            "split": split,
            "mean": result.mean,
            "trial_means": result.trial_means,
            "failures": len(result.failures),
        }, indent=2))

    _handle(body)


@cli.command()
@click.option("--sigma2", type=float, required=True, help="Per-step noise variance")
@click.option("--p", "p", type=float, required=True, help="Per-step filtering probability")
@click.option("--depth", type=int, required=True)
@click.option("--trials", type=int, required=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--noise", type=click.Choice(NOISE_KINDS), default="normal", show_default=True)
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def simulate(sigma2, p, depth, trials, seed, noise, workers, out_path):
    """Monte Carlo variance of routed vs. standard feedback chains, written as CSV."""
    try:
        params = NoiseModelParams(sigma2=sigma2, p=p, depth=depth, trials=trials, seed=seed, noise=noise)
    except SimulationError as e:
        _finish(EXIT_INVALID, f"error: {e}")

    def body():
        result = simulate_noise_chain(params, workers=workers)
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        result.write_csv(out_path)
        ks = result.column("depth")
        click.echo(json.dumps({
            "rows": 2 * len(result.depths),
            "standard_slope": fit_slope(ks, result.column("standard_var")),
            "routed_limit": variance_limit(sigma2, p),
            "out": str(out_path),
        }, indent=2))

    _handle(body)


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
def validate(config_path):
    """Check a run configuration and its graph without calling any model."""
    try:
        config = load_config(config_path)
        graph = load_graph(config.graph)
    except ConfigError as e:
        violations = getattr(e, "violations", [str(e)])
        for violation in violations:
            click.echo(f"violation: {violation}", err=True)
        _finish(EXIT_INVALID)

    problems = _graph_problems(config, graph)
    for problem in problems:
        click.echo(f"violation: {problem}", err=True)
    if problems:
        _finish(EXIT_INVALID)
    click.echo(f"{len(graph.components)} components, {len(graph.optimizable_ids())} optimizable")
    _finish(EXIT_OK)


@cli.command()
@click.option("--script", "script_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON script table to serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def stub(script_path, host, port):
    """Serve a script table over the OpenAI chat-completions protocol."""
    try:
        backend = ScriptedBackend(load_script_table(script_path))
    except ConfigError as e:
        _finish(EXIT_INVALID, f"error: {e}")

    server = StubServer(create_stub_app(backend), host=host, port=port).start()
    click.echo(f"Serving {script_path} at {server.base_url}")
    try:
        server.wait()
    except KeyboardInterrupt:
        server.stop()
    _finish(EXIT_OK)
