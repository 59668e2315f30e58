"""
Command line interface: serve the shops, build indexes, run agents, score and report.

Typical pipeline::

    webmall-bench serve &
    webmall-bench index --out index
    webmall-bench run --interface all --policy live --model gpt-4.1 --index-dir index --out results
    webmall-bench report --results results/results.jsonl --out results

``webmall-bench demo`` runs the whole pipeline in-process on the bundled data
with scripted policies.
"""

import logging
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import click
import httpx
from pydantic import ValidationError

from webmall_bench.agents import Interface, read_transcript
from webmall_bench.catalog import (
    DATA_DIR,
    Catalog,
    catalog_stats,
    default_shops,
    demo_catalog_path,
    demo_tasks_path,
    load_catalog,
    load_shops,
)
from webmall_bench.config import DEFAULT_PORTS_BASE
from webmall_bench.crawler import DEFAULT_MAX_PAGES, crawl_mall, rag_documents
from webmall_bench.errors import ConfigError, WebMallError, exit_code_for
from webmall_bench.evaluation import (
    aggregate,
    load_pricing,
    load_results,
    rescore_result,
    write_report,
    write_results,
)
from webmall_bench.harness import ALL_INTERFACES, Harness, RunConfig, parse_policy_option, results_by_interface
from webmall_bench.mall import Mall, ServerHandle
from webmall_bench.search_index import Index, default_provider, index_docs, load_index, offer_docs, save_index
from webmall_bench.tasks import load_tasks

logger = logging.getLogger(__name__)

SCRIPTS_DIR = DATA_DIR / "scripts"
RAG_INDEX_FILE = "rag.jsonl"


@contextmanager
def exit_on_error():
    """Log a WebMallError and exit with its exit code."""
    try:
        yield
    except WebMallError as e:
        logger.error(str(e))
        sys.exit(exit_code_for(e))


def _load(catalog_path: Optional[str], ports_base: int, shops_file: Optional[str]) -> Catalog:
    shops = load_shops(shops_file) if shops_file else default_shops(ports_base)
    path = Path(catalog_path) if catalog_path else demo_catalog_path()
    if not path.exists():
        raise ConfigError(f"catalog not found: {path}")
    catalog = load_catalog(path, shops)
    stats = catalog_stats(catalog)
    logger.info(f"Loaded {stats.total_offers} offers in {len(catalog.shops)} shops from {path}")
    return catalog


def _interfaces(choice: str) -> List[Interface]:
    return list(ALL_INTERFACES) if choice == "all" else [Interface(choice)]


def _run_config(**kwargs) -> RunConfig:
    try:
        return RunConfig(**kwargs)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def _offer_indexes(index_dir: Optional[str], catalog: Catalog) -> Dict[str, Index]:
    if not index_dir:
        return {}
    indexes = {}
    for shop in catalog.shops:
        path = Path(index_dir) / f"offers_{shop.shop_id}.jsonl"
        if path.exists():
            indexes[shop.shop_id] = load_index(path)
    logger.info(f"Loaded {len(indexes)} offer indexes from {index_dir}")
    return indexes


catalog_option = click.option("--catalog", "catalog_path", default=None, help="Catalog line-JSON file (default: bundled demo catalog)")
ports_option = click.option("--ports-base", type=int, default=DEFAULT_PORTS_BASE, show_default=True,
                            help="shop i listens on ports-base + i")
shops_option = click.option("--shops", "shops_file", default=None, help="JSON file defining the shops (overrides --ports-base)")


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Debug logging")
def cli(verbose):
    """Testbed comparing HTML, RAG, MCP and NLWeb agents on multi-shop tasks."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


@cli.command()
@catalog_option
@ports_option
@shops_option
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--index-dir", default=None, help="Directory with offer indexes written by the index command")
def serve(catalog_path, ports_base, shops_file, host, index_dir):
    """Serve the HTML, MCP and NLWeb interfaces of all shops."""
    with exit_on_error():
        catalog = _load(catalog_path, ports_base, shops_file)
        mall = Mall(catalog, offer_indexes=_offer_indexes(index_dir, catalog))
        handle = ServerHandle(mall, host=host).start()
        click.echo(f"Serving {len(catalog.shops)} shops; press Ctrl+C to stop")
        try:
            handle.wait()
        except KeyboardInterrupt:
            logger.info("Shutting down")
            handle.stop()


@cli.command()
@catalog_option
@ports_option
@shops_option
@click.option("--out", "out_dir", default="index", show_default=True, help="Output directory for index files")
@click.option("--max-pages", type=int, default=DEFAULT_MAX_PAGES, show_default=True, help="Crawl limit per shop")
def index(catalog_path, ports_base, shops_file, out_dir, max_pages):
    """Crawl the running shops into the RAG index and write per-shop offer indexes."""
    with exit_on_error():
        catalog = _load(catalog_path, ports_base, shops_file)
        provider = default_provider()
        with httpx.Client(timeout=30.0) as http:
            pages = crawl_mall(http, catalog.shops, max_pages)
        rag = index_docs(rag_documents(pages, catalog), provider)
        out = Path(out_dir)
        save_index(rag, out / RAG_INDEX_FILE)
        for shop in catalog.shops:
            save_index(index_docs(offer_docs(catalog, shop.shop_id), provider), out / f"offers_{shop.shop_id}.jsonl")
        covered = {d.offer_id for d in rag.docs if d.offer_id}
        logger.info(f"RAG index: {len(rag)} pages covering {len(covered)}/{len(catalog)} offers")
        click.echo(f"Wrote indexes to {out}")


@cli.command()
@catalog_option
@ports_option
@shops_option
@click.option("--tasks", "tasks_path", default=None, help="Task line-JSON file (default: bundled sample tasks)")
@click.option("--interface", type=click.Choice(["html", "rag", "mcp", "nlweb", "all"]), default="all", show_default=True)
@click.option("--policy", "policy_option", default=f"script:{SCRIPTS_DIR}",
              help="'live' or 'script:<file or directory>' (default: bundled golden scripts)")
@click.option("--model", default=None, help="Model id for the live policy (default: LLM_MODEL)")
@click.option("--pricing", "pricing_path", default=None, help="Pricing JSON (default: bundled table)")
@click.option("--out", "out_dir", default="results", show_default=True)
@click.option("--parallel", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=None, help="Sampling seed passed to the live endpoint")
@click.option("--index-dir", default="index", show_default=True, help="Directory holding the RAG index")
@click.option("--max-steps", type=int, default=None, help="Step budget (default: 40 for html, 20 otherwise)")
def run(catalog_path, ports_base, shops_file, tasks_path, interface, policy_option, model, pricing_path,
        out_dir, parallel, seed, index_dir, max_steps):
    """Run agents over a task set against the running shops."""
    with exit_on_error():
        catalog = _load(catalog_path, ports_base, shops_file)
        tasks = load_tasks(tasks_path or demo_tasks_path(), catalog)
        pricing = load_pricing(pricing_path)
        config = _run_config(
            interfaces=_interfaces(interface),
            policy=parse_policy_option(policy_option, model),
            max_steps=max_steps,
            out_dir=Path(out_dir),
            parallel=parallel,
            seed=seed,
        )
        rag_index = None
        if Interface.RAG in config.interfaces:
            rag_index = load_index(Path(index_dir) / RAG_INDEX_FILE)
        with httpx.Client(timeout=60.0) as http:
            results = Harness(config, catalog.shops, http, tasks, pricing, rag_index).run()
        path = write_results(results, config.out_dir / "results.jsonl")
        for name, group in results_by_interface(results).items():
            logger.info(f"{name}: mean CR {sum(r.cr for r in group) / len(group):.2f} over {len(group)} tasks")
        click.echo(f"Wrote {len(results)} results to {path}")


@cli.command()
@click.option("--results", "results_path", required=True, help="Results line-JSON file")
@click.option("--tasks", "tasks_path", default=None, help="Task file (default: bundled sample tasks)")
@catalog_option
@ports_option
@shops_option
@click.option("--out", "out_path", default=None, help="Output results file (default: overwrite --results)")
def score(results_path, tasks_path, catalog_path, ports_base, shops_file, out_path):
    """Rescore retrieval results against a (possibly updated) task file."""
    with exit_on_error():
        catalog = _load(catalog_path, ports_base, shops_file)
        tasks = {t.task_id: t for t in load_tasks(tasks_path or demo_tasks_path(), catalog)}
        results = load_results(results_path)
        transcripts_dir = Path(results_path).parent / "transcripts"
        rescored = []
        for result in results:
            task = tasks.get(result.task_id)
            if task is None:
                logger.warning(f"No task {result.task_id} in the task file; keeping its score")
                rescored.append(result)
                continue
            transcript_path = transcripts_dir / result.interface / f"{result.task_id}.jsonl"
            transcript = read_transcript(transcript_path) if transcript_path.exists() else None
            rescored.append(rescore_result(result, task, transcript))
        path = write_results(rescored, out_path or results_path)
        click.echo(f"Rescored {len(rescored)} results into {path}")


@cli.command()
@click.option("--results", "results_path", required=True, help="Results line-JSON file")
@click.option("--out", "out_dir", default="results", show_default=True)
def report(results_path, out_dir):
    """Write report.json, report.md and scatter.csv."""
    with exit_on_error():
        written = write_report(aggregate(load_results(results_path)), out_dir)
        click.echo("Wrote " + ", ".join(str(p) for p in written))


@cli.command()
@click.option("--out", "out_dir", default="demo-results", show_default=True)
@click.option("--interface", type=click.Choice(["html", "rag", "mcp", "nlweb", "all"]), default="all", show_default=True)
@click.option("--parallel", type=int, default=4, show_default=True)
def demo(out_dir, interface, parallel):
    """Serve, index, run the golden scripts and report, all in-process on the bundled data."""
    from fastapi.testclient import TestClient

    with exit_on_error():
        catalog = _load(None, DEFAULT_PORTS_BASE, None)
        mall = Mall(catalog)
        tasks = load_tasks(demo_tasks_path(), catalog)
        config = _run_config(
            interfaces=_interfaces(interface),
            policy=parse_policy_option(f"script:{SCRIPTS_DIR}"),
            out_dir=Path(out_dir),
            parallel=parallel,
        )
        with TestClient(mall) as http:
            rag_index = index_docs(rag_documents(crawl_mall(http, catalog.shops), catalog))
            results = Harness(config, catalog.shops, http, tasks, load_pricing(), rag_index).run()
        write_results(results, config.out_dir / "results.jsonl")
        written = write_report(aggregate(results), config.out_dir)
        click.echo(f"{len(results)} task runs; wrote " + ", ".join(str(p) for p in written))


def main():
    cli()


if __name__ == "__main__":
    main()
