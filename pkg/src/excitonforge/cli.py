import functools
import json
import logging

import click
import numpy as np

from . import config
from .exceptions import ConfigError, ConvergenceError, StoreError

EXIT_RECOVERABLE = 1
EXIT_FATAL = 2


def _handle_errors(func):
    """Maps library errors to exit codes: 1 recoverable, 2 fatal."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (StoreError, ConvergenceError) as e:
            fatal = isinstance(e, StoreError) and not e.resumable
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_FATAL if fatal else EXIT_RECOVERABLE)
        except (click.ClickException, click.exceptions.Exit, SystemExit):
            raise
        except Exception as e:
            click.echo(f"Error: {e}", err=True)
            raise SystemExit(EXIT_FATAL)

    return wrapper


def _run_config(overrides) -> config.RunConfig:
    return config.get_run_config(config.parse_overrides(overrides))


def _grid(text: str):
    try:
        start, stop, num = text.split(":")
        return np.linspace(float(start), float(stop), int(num))
    except ValueError:
        raise ConfigError(f"Grid '{text}' is not of the form start:stop:num") from None


set_option = click.option(
    "--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a run parameter for this invocation."
)


@click.group()
@click.option("--verbose", is_flag=True, help="Enable verbose debug output.")
def cli(verbose):
    """A CLI for exciton transport censuses and their structural analysis."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@cli.group(name="config")
def config_group():
    """Commands for managing the run configuration."""
    pass


@config_group.command(name="show")
@set_option
@_handle_errors
def show_config(overrides):
    """Displays the effective run configuration."""
    current_config, config_path = config.get_config()
    scope = "local" if config_path == config.LOCAL_CONFIG_FILE else "global"

    click.echo(f"--- Active ExcitonForge Config ({scope}) ---")
    click.echo(f"Location: {config_path}\n")
    if not current_config.get("run"):
        click.echo("No stored run parameters; defaults apply. Use 'excitonforge config set' to change them.\n")
    run = _run_config(overrides)
    click.echo(json.dumps(run.to_dict(), indent=4, sort_keys=True))
    click.echo(f"\nconfig hash: {run.config_hash()}")


@config_group.command(name="set")
@click.argument("key")
@click.argument("value")
@click.option("--local", is_flag=True, help="Save to the local project config (./exciton-forge/config.json).")
@_handle_errors
def set_value(key, value, local):
    """Stores a run parameter."""
    updated = config.set_run_value(key, value, local=local)
    scope = "local" if local else "global"
    click.echo(f"Set {key}={getattr(updated, key)!r} in the {scope} config.")


@config_group.command(name="unset")
@click.argument("key")
@click.option("--local", is_flag=True, help="Remove from the local project config.")
@_handle_errors
def unset_value(key, local):
    """Removes a stored run parameter so its default applies."""
    if config.unset_run_value(key, local=local):
        click.echo(f"Removed '{key}'; the default applies again.")
    else:
        click.echo(f"'{key}' is not set in the {'local' if local else 'global'} config.")


@cli.command(name="sample")
@set_option
@click.option("--fresh", is_flag=True, help="Discard an existing store instead of resuming it.")
@_handle_errors
def sample(overrides, fresh):
    """Runs the efficiency census."""
    from . import pipeline

    run = _run_config(overrides)
    store = pipeline.run_census(run, resume=not fresh)
    click.echo(f"Sampled {store.n_samples} structures; {len(store)} above epsilon {run.efficiency_threshold}.")
    click.echo(f"Store: {store.directory}")


@cli.command(name="network")
@set_option
@_handle_errors
def network(overrides):
    """Builds the similarity network, clusters it and computes its layout."""
    from . import pipeline

    run = _run_config(overrides)
    net, partition, _ = pipeline.run_network_stage(pipeline.open_store(run), run)
    click.echo(f"Network: {net.n_nodes} nodes, {net.n_edges} edges at cutoff {net.cutoff}.")
    _echo_partition(partition)


@cli.command(name="cluster")
@set_option
@_handle_errors
def cluster(overrides):
    """Reclusters the stored network, e.g. with another inflation."""
    from . import pipeline

    run = _run_config(overrides)
    net = pipeline.load_network(pipeline.open_store(run), run)
    partition, _ = pipeline.run_cluster_stage(net, run)
    _echo_partition(partition)


def _echo_partition(partition):
    click.echo(f"MCL (p={partition.inflation}) converged in {partition.iterations} iterations: {partition.n_clusters} clusters.")
    for cluster_id, fraction in partition.populations.items():
        marker = " (noise)" if cluster_id in partition.noise_clusters else ""
        click.echo(f"  cluster {cluster_id}: {100 * fraction:.1f}%{marker}")


@cli.command(name="analyze")
@set_option
@_handle_errors
def analyze(overrides):
    """Robustness, active sites, pairs and class statistics."""
    from . import pipeline

    run = _run_config(overrides)
    store = pipeline.open_store(run)
    net = pipeline.load_network(store, run)
    result = pipeline.run_analysis_stage(store, pipeline.load_partition(run), run, net=net)
    for stats in result.classes:
        click.echo(
            f"{stats.label:>12}: {100 * stats.population:5.1f}%  mean loss {stats.mean_delta_eps_rand:.3f}  "
            f"t* fastest {stats.fastest_t_star:.2f} mean {stats.mean_t_star:.2f}"
        )


@cli.command(name="noise")
@set_option
@click.option("--with-robustness", is_flag=True, help="Recompute displacement losses and classes under noise.")
@_handle_errors
def noise(overrides, with_robustness):
    """Noisy efficiencies under the configured rate model."""
    from . import pipeline

    run = _run_config(overrides)
    partition = pipeline.load_partition(run) if with_robustness else None
    frame = pipeline.run_noise_stage(pipeline.open_store(run), run, partition=partition)
    if len(frame):
        click.echo(
            f"{run.noise_model}: mean epsilon {frame['epsilon_noisy'].mean():.4f} "
            f"(coherent {frame['epsilon_coherent'].mean():.4f}) over {len(frame)} structures."
        )
    else:
        click.echo("The store is empty.")


@cli.command(name="landscape")
@set_option
@click.option("--seed", type=int, default=None, help="Structure to scan; defaults to the best one with a pair.")
@click.option("--r-p-grid", default="0.05:0.6:23", show_default=True, help="Pair sizes as start:stop:num.")
@click.option("--r-b-grid", default="0.05:0.8:31", show_default=True, help="Pair offsets as start:stop:num.")
@_handle_errors
def landscape(overrides, seed, r_p_grid, r_b_grid):
    """Efficiency landscape over pair size and pair-backbone distance."""
    from . import pipeline

    run = _run_config(overrides)
    surface = pipeline.run_landscape_stage(pipeline.open_store(run), run, _grid(r_p_grid), _grid(r_b_grid), seed=seed)
    high = np.nan_to_num(surface.epsilon, nan=0.0) > run.efficiency_threshold
    click.echo(f"Backbone alone: epsilon {surface.backbone_epsilon:.4f}; {int(high.sum())} grid points above {run.efficiency_threshold}.")


@cli.command(name="export")
@set_option
@click.option("--seed", type=int, default=None, help="Also export the population trajectory of this structure.")
@_handle_errors
def export(overrides, seed):
    """Writes CSV mirrors of the store, census and histogram."""
    from . import pipeline

    run = _run_config(overrides)
    for path in pipeline.export_stage(pipeline.open_store(run), run, seed=seed):
        click.echo(f"Wrote {path}")


if __name__ == "__main__":
    cli()
