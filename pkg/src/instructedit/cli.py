"""Command-line entry points over the pipeline, the eval harness and the service.

Exit codes: 0 success, 1 runtime failure (stage-labeled on stderr),
2 usage error. --fake-backends swaps the whole suite for deterministic
fakes, which is the CI path; every subcommand honors --seed.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .backends import BackendLoadError, make_suite
from .config import CONFIG_ENV_VAR, ConfigError, load_config
from .direction import save_direction
from .evaluation import (
    DatasetError,
    ItemRow,
    load_dataset,
    oracle_pair,
    run_grid,
    table_grid,
    write_report,
)
from .pipeline import (
    ConfigValidationError,
    EditConfig,
    EditRequest,
    PipelineError,
    direction_stats,
    edit,
    generate_directions,
    invert_only,
)
from .prompting import PromptError, load_few_shot_pool
from .service import create_app

_RUNTIME_ERRORS = (
    PipelineError,
    ConfigValidationError,
    ConfigError,
    DatasetError,
    PromptError,
    BackendLoadError,
    OSError,
)


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


@click.group()
@click.option(
    "--config",
    "config_path",
    envvar=CONFIG_ENV_VAR,
    type=click.Path(dir_okay=False),
    default=None,
    help="JSON config file; flags override its values.",
)
@click.option("--fake-backends", is_flag=True, default=False, help="Use the deterministic fake suite.")
@click.pass_context
def main(ctx, config_path, fake_backends):
    """Instruction-guided image editing and its evaluation harness."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["fake_backends"] = fake_backends


def _runtime(ctx, **overrides):
    if ctx.obj.get("fake_backends"):
        overrides["fake_backends"] = True
    return load_config(ctx.obj.get("config_path"), overrides)


def _load_pool(pool_path, config):
    path = pool_path or config.pool_path
    return load_few_shot_pool(path) if path else []


def _knobs(captions, shots, style, lock_in, user_caption, ddim_steps, strength, seed, retry_limit):
    lock_mode = {"none": "none", "generated": "generated_caption", "user": "user_caption"}[lock_in]
    return EditConfig(
        n_captions=captions,
        shots=shots,
        prompt_style=style,
        lock_in_mode=lock_mode,
        user_caption=user_caption,
        ddim_steps=ddim_steps,
        direction_strength=strength,
        rng_seed=seed,
        retry_limit=retry_limit,
    )


@main.command("edit")
@click.argument("image", type=click.Path(exists=True, dir_okay=False), required=False)
@click.option("--instruction", help="The edit request.")
@click.option("--out", type=click.Path(dir_okay=False), help="Edited image path (PNG).")
@click.option("--captions", type=click.Choice(["1", "2", "4"]), default="1")
@click.option("--shots", type=click.Choice(["0", "1", "3"]), default="0")
@click.option("--style", type=click.Choice(["terse", "detailed"]), default="terse")
@click.option("--lock-in", type=click.Choice(["none", "generated", "user"]), default="none")
@click.option("--user-caption", default=None)
@click.option("--ddim-steps", type=int, default=100)
@click.option("--direction-strength", type=float, default=1.0)
@click.option("--retry-limit", type=int, default=3)
@click.option("--seed", type=int, default=0)
@click.option("--pool", "pool_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--replay", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Provenance sidecar to reproduce; overrides the other knobs.")
@click.pass_context
def cmd_edit(ctx, image, instruction, out, captions, shots, style, lock_in, user_caption,
             ddim_steps, direction_strength, retry_limit, seed, pool_path, replay):
    """Edit IMAGE according to --instruction; writes the image and a provenance sidecar."""
    if replay is not None:
        sidecar = json.loads(Path(replay).read_text(encoding="utf-8"))
        image = image or sidecar["image"]
        instruction = sidecar["provenance"]["instruction"]
        knobs = EditConfig(**sidecar["provenance"]["config"])
        out = out or sidecar["out"]
    else:
        if image is None or instruction is None or out is None:
            raise click.UsageError("edit needs IMAGE, --instruction and --out (or --replay)")
        knobs = _knobs(int(captions), int(shots), style, lock_in, user_caption,
                       ddim_steps, direction_strength, seed, retry_limit)
    try:
        config = _runtime(ctx)
        suite = make_suite(config)
        pool = _load_pool(pool_path, config)
        request = EditRequest(image=Image.open(image), instruction=instruction, knobs=knobs)
        result = edit(request, suite, pool)
    except _RUNTIME_ERRORS as exc:
        _fail(str(exc))

    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    result.edited_image.save(out_path, format="PNG")
    reconstruction_path = out_path.with_suffix(".reconstruction.png")
    result.inverted_reconstruction.save(reconstruction_path, format="PNG")
    sidecar_path = out_path.with_suffix(".provenance.json")
    sidecar_path.write_text(
        json.dumps(
            {"image": str(image), "out": str(out_path), "provenance": result.provenance},
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    click.echo(f"edited image -> {out_path}")
    click.echo(f"reconstruction -> {reconstruction_path}")
    click.echo(f"provenance -> {sidecar_path}")


@main.command("invert")
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--caption", default=None, help="Skip the captioner and use this caption.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--ddim-steps", type=int, default=100)
@click.pass_context
def cmd_invert(ctx, image, caption, out, ddim_steps):
    """Run captioning + inversion only; writes the reconstruction and the noise latent."""
    try:
        config = _runtime(ctx)
        suite = make_suite(config)
        noise, reconstruction, used = invert_only(Image.open(image), caption, suite, ddim_steps)
    except _RUNTIME_ERRORS as exc:
        _fail(str(exc))
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    reconstruction.save(out_path, format="PNG")
    latent_path = out_path.with_suffix(".noise.npy")
    np.save(latent_path, noise.latent)
    click.echo(f"caption: {used}")
    click.echo(f"reconstruction -> {out_path}")
    click.echo(f"noise latent -> {latent_path}")


@main.command("directions")
@click.option("--instruction", required=True)
@click.option("--caption", default=None, help="Stage-1 caption to lock in, when lock mode needs one.")
@click.option("--captions", type=click.Choice(["1", "2", "4"]), default="1")
@click.option("--shots", type=click.Choice(["0", "1", "3"]), default="0")
@click.option("--style", type=click.Choice(["terse", "detailed"]), default="terse")
@click.option("--lock-in", type=click.Choice(["none", "generated", "user"]), default="none")
@click.option("--user-caption", default=None)
@click.option("--seed", type=int, default=0)
@click.option("--pool", "pool_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--save-direction", "save_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def cmd_directions(ctx, instruction, caption, captions, shots, style, lock_in, user_caption,
                   seed, pool_path, save_path):
    """Generate before/after captions and the edit direction for an instruction."""
    knobs = _knobs(int(captions), int(shots), style, lock_in, user_caption, 100, 1.0, seed, 3)
    try:
        config = _runtime(ctx)
        suite = make_suite(config)
        pool = _load_pool(pool_path, config)
        bundle, direction, completion = generate_directions(
            instruction, knobs, suite, pool, caption=caption
        )
    except _RUNTIME_ERRORS as exc:
        _fail(str(exc))
    click.echo(json.dumps(
        {
            "before": list(bundle.before),
            "after": list(bundle.after),
            "locked_first_before": bundle.locked_first_before,
            "lock_source": bundle.lock_source,
            "direction": direction_stats(direction),
        },
        indent=2,
    ))
    if save_path:
        save_direction(direction, save_path)
        click.echo(f"direction -> {save_path}", err=True)


def _expand_configs(spec_text: str, seed: int, ddim_steps: int) -> list[EditConfig]:
    if spec_text == "table-grid":
        return table_grid(rng_seed=seed, ddim_steps=ddim_steps)
    if spec_text == "oracle":
        return oracle_pair(rng_seed=seed, ddim_steps=ddim_steps)
    raw = json.loads(Path(spec_text).read_text(encoding="utf-8"))
    return [EditConfig(**{"rng_seed": seed, "ddim_steps": ddim_steps, **entry}) for entry in raw]


@main.command("eval")
@click.option("--dataset", "dataset_root", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--split", type=click.Choice(["dev", "test"]), default="test")
@click.option("--configs", "configs_spec", default="table-grid",
              help="'table-grid', 'oracle', or a JSON file of knob rows.")
@click.option("--subset", type=int, default=None, help="Evaluate only the first N items.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None,
              help="Item-level JSONL checkpoint; reruns resume from it.")
@click.option("--pool", "pool_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--ddim-steps", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.pass_context
def cmd_eval(ctx, dataset_root, split, configs_spec, subset, out_dir, checkpoint, pool_path,
             ddim_steps, seed):
    """Run the scoring grid over a dataset split and write report files."""
    try:
        config = _runtime(ctx)
        suite = make_suite(config)
        pool = _load_pool(pool_path, config)
        scorer = _make_scorer(config)
        dataset = load_dataset(dataset_root, split)
        if subset is not None:
            dataset = dataset[:subset]
        configs = _expand_configs(configs_spec, seed, ddim_steps)

        precomputed = {}
        sink = None
        handle = None
        if checkpoint:
            checkpoint_path = Path(checkpoint)
            if checkpoint_path.exists():
                for line in checkpoint_path.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        row = ItemRow(**json.loads(line))
                        precomputed[(row.fingerprint, row.triple_id)] = row
            handle = checkpoint_path.open("a", encoding="utf-8")

            def sink(row):  # noqa: F811
                handle.write(json.dumps(dataclasses.asdict(row)) + "\n")
                handle.flush()

        try:
            report = run_grid(dataset, configs, suite, scorer, pool,
                              precomputed=precomputed or None, row_sink=sink)
        finally:
            if handle is not None:
                handle.close()
    except _RUNTIME_ERRORS as exc:
        _fail(str(exc))

    paths = write_report(report, out_dir)
    click.echo(f"report -> {paths['aggregates']}")
    scored = [a for a in report.aggregates if a.items_scored > 0]
    if scored:
        best_t = max(scored, key=lambda a: a.clip_t_avg)
        best_i = max(scored, key=lambda a: a.clip_i_avg)
        click.echo(f"best CLIP-T: {best_t.clip_t_avg:.4f} ± {best_t.clip_t_stdev:.4f} ({best_t.knobs})")
        click.echo(f"best CLIP-I: {best_i.clip_i_avg:.4f} ± {best_i.clip_i_stdev:.4f} ({best_i.knobs})")
    else:
        click.echo("no items scored")


def _make_scorer(config):
    if config.fake_backends:
        from .backends.fake import stable_seed

        class HashScorer:
            """Offline stand-in scorer keyed on exact content."""

            def embed_image(self, image):
                rng = np.random.default_rng(stable_seed("cli-scorer-image", image.size, image.tobytes()))
                return rng.normal(size=32)

            def embed_text(self, text):
                rng = np.random.default_rng(stable_seed("cli-scorer-text", text))
                return rng.normal(size=32)

        return HashScorer()
    from .evaluation import ClipScorer

    return ClipScorer(config.eval_model, config.device)


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--pool", "pool_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
def cmd_serve(ctx, host, port, pool_path):
    """Start the HTTP service (Ctrl-C to stop)."""
    import uvicorn

    try:
        config = _runtime(ctx)
        suite = make_suite(config)
        pool = _load_pool(pool_path, config)
    except _RUNTIME_ERRORS as exc:
        _fail(str(exc))
    app = create_app(suite, config, pool)
    uvicorn.run(app, host=host, port=port, log_level="info")


@main.command("pool-validate")
@click.argument("pool_file", type=click.Path(exists=True, dir_okay=False))
def cmd_pool_validate(pool_file):
    """Check a few-shot pool file for the required 4+4 caption shape."""
    try:
        pool = load_few_shot_pool(pool_file)
    except PromptError as exc:
        _fail(str(exc))
    click.echo(f"{pool_file}: {len(pool)} valid examples")


if __name__ == "__main__":
    main()
