"""Command-line entry points: ``promptseed <command> ...``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import sams
from .evalio import codecs, metrics, synth
from .pipeline import Framework, TrainConfig, load_state, save_state


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(path, overrides) -> TrainConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
        doc[key.replace("-", "_")] = _parse_value(value)
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise click.ClickException(f"invalid config: {exc}") from exc


def _samples(fw: Framework, scenes):
    return [(sid, fw.prepare_scene(scene, sid)) for sid, scene in scenes]


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("synth-data")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--n", "n", type=int, default=20, show_default=True, help="Number of scenes.")
@click.option("--classes", type=int, default=3, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def synth_data(seed: int, n: int, classes: int, out: str) -> None:
    """Write a synthetic dataset: images, mask files and ground-truth seeds."""
    scenes = synth.make_scenes(seed, n, n_classes=classes)
    synth.write_dataset(out, scenes, synth.default_registry(classes))
    click.echo(f"wrote {n} scenes to {out}")


@main.command("train-prompts")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key.")
@click.option("--max-steps", type=int, default=None, help="Shortcut for --set max_steps=N.")
def train_prompts(config_path, data, out, overrides, max_steps) -> None:
    """Learn classification and segmentation contexts on a dataset directory."""
    if max_steps is not None:
        overrides = (*overrides, f"max_steps={max_steps}")
    config = _load_config(config_path, overrides)
    registry, scenes = synth.read_dataset(data)
    fw = Framework(registry, config)
    samples = [s for _, s in _samples(fw, scenes)]
    before = fw.evaluate_loss(samples, fw.init_state()) if any(s.present for s in samples) else float("nan")
    state = fw.train(samples)
    after = fw.evaluate_loss(samples, state)
    save_state(out, state, config, registry)
    click.echo(json.dumps({"steps": state.step, "loss_before": before, "loss_after": after,
                           "config_hash": config.digest(), "state": str(out)}))


@main.command("gen-seeds")
@click.option("--state", "state_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--mode", type=click.Choice(["coarse", "fine"]), default="fine", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def gen_seeds(state_path, data, mode, out) -> None:
    """Write one seed PNG plus sidecar per image of a dataset directory."""
    state, config, registry = load_state(state_path)
    _, scenes = synth.read_dataset(data)
    fw = Framework(registry, config)
    written = fw.generate_seeds(_samples(fw, scenes), state, out, mode)
    click.echo(f"wrote {len(written)} seed maps to {out}")


def _masks_for(masks_dir: Path, key: str) -> Path:
    for name in (f"{key}.masks.json", f"{key}.json"):
        if (masks_dir / name).exists():
            return masks_dir / name
    raise click.ClickException(f"no mask file for {key} in {masks_dir}")


@main.command("refine")
@click.option("--scores", "scores_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--masks", "masks_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--alpha", type=float, default=sams.DEFAULT_ALPHA, show_default=True)
def refine(scores_dir, masks_dir, out, alpha) -> None:
    """Refine per-image score tensors (``<id>.bin``) into seed maps with mask files.

    A header flag ``background_channel: true`` marks the last channel as an
    explicit background score.
    """
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for path in sorted(Path(scores_dir).glob("*.bin")):
        key = path.stem
        scores, header = codecs.read_tensor(path)
        masks, h, w = codecs.read_masks(_masks_for(Path(masks_dir), key))
        bg = bool(header.get("background_channel", False))
        ids = header.get("class_ids") or list(range(scores.shape[0] - int(bg)))
        seed = sams.refine_score_map(scores.astype(np.float64), masks, alpha, class_ids=ids, background_channel=bg)
        given = header.get("class_names")
        names = {c + 1: given[i] if given else f"class {c}" for i, c in enumerate(ids)}
        codecs.write_seed(out_dir / f"{key}.png", seed, names)
        count += 1
    click.echo(f"wrote {count} seed maps to {out}")


def _read_seed_dir(directory: Path) -> dict[str, sams.SeedMap]:
    return {p.stem: codecs.read_seed(p) for p in sorted(directory.glob("*.png"))}


@main.command("eval")
@click.option("--pred", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gt", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--num-classes", type=int, default=None, help="Including background; inferred when omitted.")
def evaluate(pred, gt, num_classes) -> None:
    """Print a JSON mIoU report over seed maps matched by file name."""
    preds, gts = _read_seed_dir(Path(pred)), _read_seed_dir(Path(gt))
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise click.ClickException(f"{len(missing)} ground-truth maps have no prediction, e.g. {missing[0]}")
    keys = sorted(gts)
    names: dict[int, str] = {}
    for k in keys:
        names.update(gts[k].class_names)
    if num_classes is None:
        top = max([max(names, default=0)] + [int(m.labels.max(initial=0)) for m in (*gts.values(), *preds.values())])
        num_classes = top + 1
    try:
        report = metrics.miou([preds[k] for k in keys], [gts[k] for k in keys], num_classes)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(report.to_dict(names), indent=1))


if __name__ == "__main__":
    sys.exit(main())
