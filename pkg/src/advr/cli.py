"""Command-line client for the advr service.

Every subcommand is a thin HTTP call.  By default the service runs in-process
(no socket, same filesystem); point --server or ADVR_SERVER at a URL to drive
a remote instance started with `advr serve`.  Commands exit 0 only when the
requested stage(s) completed; any service error exits 1 with the detail on
stderr.
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx


class _InProcessTransport(httpx.BaseTransport):
    """Serves each request through the ASGI app, no socket involved."""

    def __init__(self, app) -> None:
        self._asgi = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        async def call() -> tuple[int, httpx.Headers, bytes]:
            response = await self._asgi.handle_async_request(request)
            body = await response.aread()
            return response.status_code, response.headers, body

        status, headers, body = asyncio.run(call())
        return httpx.Response(status_code=status, headers=headers, content=body)


def _make_client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from .service.app import app
    return httpx.Client(transport=_InProcessTransport(app),
                        base_url="http://advr.internal", timeout=None)


def _call(ctx: click.Context, path: str, payload: dict | None = None) -> dict:
    client: httpx.Client = ctx.obj["client"]
    try:
        if payload is None:
            resp = client.get(path)
        else:
            resp = client.post(path, json=payload)
    except httpx.HTTPError as exc:
        click.echo(f"error: cannot reach service: {exc}", err=True)
        sys.exit(1)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        click.echo(f"error: {detail}", err=True)
        sys.exit(1)
    return resp.json()


def _emit(data: dict) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))


def _config_text(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


_config_opt = click.option("--config", "config_path", required=True,
                           type=click.Path(exists=True, dir_okay=False),
                           help="Run configuration file.")


@click.group()
@click.option("--server", envvar="ADVR_SERVER", default=None,
              help="Service URL; default runs the service in-process.")
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Adversarial attacks and defenses for audio anti-spoofing classifiers."""
    ctx.ensure_object(dict)
    ctx.obj["client"] = _make_client(server)
    ctx.call_on_close(ctx.obj["client"].close)


@main.command()
@_config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for WAV, protocol, and manifest files.")
@click.pass_context
def synth(ctx: click.Context, config_path: str, out: str) -> None:
    """Generate the synthetic WAV corpus described by [dataset] and [features]."""
    _emit(_call(ctx, "/synth", {"config_text": _config_text(config_path),
                                "out_dir": out}))


@main.command()
@_config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for the checkpoint and training log.")
@click.pass_context
def train(ctx: click.Context, config_path: str, out: str) -> None:
    """Train a fresh model for t1 clean epochs."""
    _emit(_call(ctx, "/train", {"config_text": _config_text(config_path),
                                "out_dir": out}))


@main.command()
@_config_opt
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for perturbed spectrograms and the results file.")
@click.option("--epsilon", type=float, default=None, help="Perturbation budget.")
@click.option("--alpha", type=float, default=None, help="Step size.")
@click.option("--iters", type=int, default=None, help="PGD iteration count.")
@click.option("--seed", type=int, default=None, help="Dataset seed override.")
@click.pass_context
def attack(ctx: click.Context, config_path: str, checkpoint: str, out: str,
           epsilon: float | None, alpha: float | None, iters: int | None,
           seed: int | None) -> None:
    """Attack the evaluation split of the configured dataset."""
    _emit(_call(ctx, "/attack", {
        "config_text": _config_text(config_path), "checkpoint": checkpoint,
        "out_dir": out, "epsilon": epsilon, "alpha": alpha,
        "iterations": iters, "seed": seed}))


@main.command()
@_config_opt
@click.option("--checkpoint-in", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--checkpoint-out", required=True, type=click.Path(dir_okay=False))
@click.option("--log", type=click.Path(dir_okay=False), default=None,
              help="Metrics log; appended to if it exists.")
@click.option("--t1", type=int, default=None, help="Clean epochs before phase 2.")
@click.option("--t2", type=int, default=None, help="Adversarial epochs.")
@click.option("--batch", type=int, default=None, help="Batch size.")
@click.option("--lr", type=float, default=None, help="Learning rate.")
@click.option("--epsilon", type=float, default=None, help="Perturbation budget.")
@click.option("--alpha", type=float, default=None, help="Step size.")
@click.option("--iters", type=int, default=None, help="PGD iteration count.")
@click.option("--seed", type=int, default=None, help="Training seed override.")
@click.pass_context
def advtrain(ctx: click.Context, config_path: str, checkpoint_in: str,
             checkpoint_out: str, log: str | None, t1: int | None,
             t2: int | None, batch: int | None, lr: float | None,
             epsilon: float | None, alpha: float | None, iters: int | None,
             seed: int | None) -> None:
    """Continue a checkpoint with clean then adversarial epochs."""
    _emit(_call(ctx, "/advtrain", {
        "config_text": _config_text(config_path), "checkpoint_in": checkpoint_in,
        "checkpoint_out": checkpoint_out, "log": log, "t1": t1, "t2": t2,
        "batch_size": batch, "learning_rate": lr, "epsilon": epsilon,
        "alpha": alpha, "iterations": iters, "seed": seed}))


@main.command()
@_config_opt
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--attack/--no-attack", "with_attack", default=False,
              help="Attack each example before scoring.")
@click.option("--filter", "filter_name", default="none",
              type=click.Choice(["none", "median", "mean", "gaussian"]),
              help="Smoothing filter applied before prediction.")
@click.pass_context
def evaluate(ctx: click.Context, config_path: str, checkpoint: str,
             with_attack: bool, filter_name: str) -> None:
    """Score one (condition, filter) cell on the evaluation split."""
    _emit(_call(ctx, "/evaluate", {
        "config_text": _config_text(config_path), "checkpoint": checkpoint,
        "attack": with_attack, "filter": filter_name}))


@main.command()
@_config_opt
@click.option("--checkpoint", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--kind", default="pre_defense",
              type=click.Choice(["pre_defense", "post_defense"]))
@click.pass_context
def report(ctx: click.Context, config_path: str, checkpoint: str, out: str,
           kind: str) -> None:
    """Write the full accuracy grid for one checkpoint."""
    _emit(_call(ctx, "/report", {
        "config_text": _config_text(config_path), "checkpoint": checkpoint,
        "out_dir": out, "kind": kind}))


@main.command()
@_config_opt
@click.option("--out", required=True, type=click.Path(file_okay=False),
              help="Directory for all run artifacts.")
@click.pass_context
def run(ctx: click.Context, config_path: str, out: str) -> None:
    """Full pipeline: train, evaluate, adversarially train, re-evaluate."""
    _emit(_call(ctx, "/run", {"config_text": _config_text(config_path),
                              "out_dir": out}))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
def serve(host: str, port: int) -> None:
    """Run the HTTP service under uvicorn."""
    import uvicorn

    uvicorn.run("advr.service.app:app", host=host, port=port)


if __name__ == "__main__":
    main()
