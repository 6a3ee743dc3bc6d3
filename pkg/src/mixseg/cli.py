"""Command-line entry point.

Subcommands: gen-data (synthesize a corpus), train, eval, gradcheck
(finite-difference suite), ablate (the five-row toggle study), and
export-viz (per-sample overlay triptychs).  Exit codes: 0 success,
1 check failure, 2 usage or input error.  All randomness flows from
--seed flags or the config file; no environment variables are read.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np

from .data import (
    CorpusError,
    SynthConfig,
    gen_corpus,
    read_corpus,
    write_corpus,
    write_ppm,
)
from .gradcheck import PASS_THRESHOLD, corrupt_op, run_suite
from .network import CheckpointError, load_checkpoint
from .training import (
    ABLATION_CSV,
    ConfigurationError,
    TrainingError,
    ablate,
    dice_iou,
    evaluate,
    load_train_config,
    predict_probs,
    train,
)

EXIT_CHECK_FAILURE = 1
EXIT_USAGE = 2


def _fail_usage(message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(EXIT_USAGE)


def _load_corpus_or_exit(data_dir):
    path = Path(data_dir)
    if not (path / "manifest.json").is_file():
        _fail_usage(f"no corpus manifest found at {path}")
    try:
        return read_corpus(path)
    except CorpusError as e:
        _fail_usage(str(e))


@click.group()
def main():
    """Mixed-supervision segmentation toolkit."""


@main.command("gen-data")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option("--size", default="96x96", show_default=True, help="Image size HxW.")
@click.option(
    "--counts",
    default="60,200,200,100",
    show_default=True,
    help="Pixel,box,scribble train counts plus test count.",
)
def gen_data(out_dir, seed, size, counts):
    """Generate a synthetic corpus with all three annotation streams."""
    try:
        h, w = (int(v) for v in size.lower().split("x"))
    except ValueError:
        _fail_usage(f"--size must look like 96x96, got {size!r}")
    try:
        parsed = tuple(int(v) for v in counts.split(","))
    except ValueError:
        parsed = ()
    if len(parsed) != 4 or min(parsed) < 0:
        _fail_usage(f"--counts must be four non-negative integers, got {counts!r}")
    if parsed[0] < 1:
        _fail_usage("--counts: the pixel stream requires at least one sample")
    try:
        cfg = SynthConfig(height=h, width=w, seed=seed)
        samples = gen_corpus(cfg, counts=parsed)
        digest = write_corpus(samples, out_dir)
    except (ValueError, OSError) as e:
        _fail_usage(str(e))
    click.echo(f"wrote {len(samples)} samples to {out_dir}")
    click.echo(f"manifest sha256 {digest}")


_TOGGLE = click.Choice(["on", "off"])


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path(), help="Corpus directory.")
@click.option("--config", "config_file", type=click.Path(), help="key = value config file.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--toggle-sp", type=_TOGGLE, default=None, help="Override the box-projection loss.")
@click.option("--toggle-bme", type=_TOGGLE, default=None, help="Override the scribble loss.")
@click.option("--toggle-lr", type=_TOGGLE, default=None, help="Override the fusion regularizer.")
def train_cmd(data_dir, config_file, out_dir, toggle_sp, toggle_bme, toggle_lr):
    """Train on a corpus; writes losses.csv, eval.csv, and a checkpoint."""
    if config_file and not Path(config_file).is_file():
        _fail_usage(f"config file not found: {config_file}")
    overrides = {}
    for key, value in (
        ("use_sp", toggle_sp),
        ("use_bme", toggle_bme),
        ("use_lr", toggle_lr),
    ):
        if value is not None:
            overrides[key] = value == "on"
    try:
        cfg = load_train_config(config_file, overrides)
    except ConfigurationError as e:
        _fail_usage(str(e))
    corpus = _load_corpus_or_exit(data_dir)
    try:
        result = train(corpus, cfg, out_dir=out_dir)
    except (ConfigurationError, CorpusError) as e:
        _fail_usage(str(e))
    except TrainingError as e:
        click.echo(f"training failed: {e}", err=True)
        sys.exit(EXIT_CHECK_FAILURE)
    last = result.rows[-1]
    click.echo(f"trained {cfg.iterations} iterations; final total loss {last.l_total:.4f}")
    if result.eval_rows:
        _, rep = result.eval_rows[-1]
        click.echo(f"final test Dice {rep.wavg_dice:.4f}  IoU {rep.wavg_iou:.4f}")
    click.echo(f"outputs in {out_dir}")


@main.command("eval")
@click.option("--checkpoint", "ckpt", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_file", type=click.Path(), help="Optional CSV destination.")
def eval_cmd(ckpt, data_dir, out_file):
    """Evaluate a checkpoint on the corpus test split."""
    corpus = _load_corpus_or_exit(data_dir)
    tests = [s for s in corpus if s.split == "test"]
    if not tests:
        _fail_usage(f"corpus at {data_dir} has no test split")
    try:
        params, iteration, _, _ = load_checkpoint(ckpt)
    except CheckpointError as e:
        _fail_usage(str(e))
    try:
        report = evaluate(params, [("test", tests)])
    except ValueError as e:
        _fail_usage(str(e))
    click.echo(f"checkpoint iteration {iteration}")
    for name in report.names:
        click.echo(
            f"{name}: n={report.counts[name]} dice={report.dice[name]:.4f} "
            f"iou={report.iou[name]:.4f}"
        )
    click.echo(f"wAVG: dice={report.wavg_dice:.4f} iou={report.wavg_iou:.4f}")
    if out_file:
        lines = ["dataset,count,dice,iou"]
        for name in report.names:
            lines.append(
                f"{name},{report.counts[name]},{repr(report.dice[name])},{repr(report.iou[name])}"
            )
        lines.append(
            f"wAVG,{sum(report.counts.values())},{repr(report.wavg_dice)},{repr(report.wavg_iou)}"
        )
        Path(out_file).write_text("\n".join(lines) + "\n")


@main.command("gradcheck")
@click.option("--seed", default=0, type=int, show_default=True)
@click.option(
    "--corrupt",
    "corrupt_name",
    default=None,
    help="Test hook: bias the named op's gradient to prove the suite catches it.",
)
def gradcheck_cmd(seed, corrupt_name):
    """Finite-difference check of every op and loss; exit 1 on failure."""
    seeds = tuple(range(seed, seed + 5))

    def run():
        return run_suite(seeds=seeds)

    try:
        if corrupt_name is not None:
            with corrupt_op(corrupt_name):
                results = run()
        else:
            results = run()
    except ValueError as e:
        _fail_usage(str(e))
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        click.echo(f"{r.name:<{width}}  {r.max_rel_err:.3e}  {status}")
    failing = [r.name for r in results if not r.passed]
    click.echo(f"{len(results)} checks, threshold {PASS_THRESHOLD:g}")
    if failing:
        click.echo("failing: " + ", ".join(failing), err=True)
        sys.exit(EXIT_CHECK_FAILURE)


@main.command("ablate")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--config", "config_file", type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds.")
def ablate_cmd(data_dir, config_file, out_dir, seeds):
    """Run the five-row loss-toggle study and write ablation.csv."""
    try:
        seed_list = [int(v) for v in seeds.split(",")] if seeds else []
    except ValueError:
        seed_list = []
    if not seed_list:
        _fail_usage(f"--seeds must be comma-separated integers, got {seeds!r}")
    if config_file and not Path(config_file).is_file():
        _fail_usage(f"config file not found: {config_file}")
    try:
        cfg = load_train_config(config_file)
    except ConfigurationError as e:
        _fail_usage(str(e))
    corpus = _load_corpus_or_exit(data_dir)

    def progress(label, seed, dice):
        click.echo(f"{label} seed {seed}: dice {dice:.4f}")

    try:
        rows = ablate(corpus, cfg, seeds=seed_list, out_dir=out_dir, progress=progress)
    except TrainingError as e:
        click.echo(f"ablation failed: {e}", err=True)
        sys.exit(EXIT_CHECK_FAILURE)
    for row in rows:
        click.echo(
            f"{row.label:<8} sp={int(row.use_sp)} bme={int(row.use_bme)} "
            f"lr={int(row.use_lr)}  dice {row.mean_dice:.4f}  iou {row.mean_iou:.4f}"
        )
    click.echo(f"table written to {Path(out_dir) / ABLATION_CSV}")


def _overlay(image_u8: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Red-tinted overlay; identical masks give identical overlays."""
    out = image_u8.astype(np.float64)
    m = mask.astype(bool)
    out[0][m] = 0.55 * out[0][m] + 0.45 * 255.0
    out[1][m] *= 0.55
    out[2][m] *= 0.55
    return np.round(out).astype(np.uint8)


@main.command("export-viz")
@click.option("--checkpoint", "ckpt", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def export_viz(ckpt, data_dir, out_dir):
    """Write image | truth-overlay | prediction-overlay triptychs."""
    corpus = _load_corpus_or_exit(data_dir)
    tests = [s for s in corpus if s.split == "test"]
    if not tests:
        _fail_usage(f"corpus at {data_dir} has no test split")
    try:
        params, _, _, _ = load_checkpoint(ckpt)
    except CheckpointError as e:
        _fail_usage(str(e))
    if (params.cfg.height, params.cfg.width) != tests[0].truth.shape:
        _fail_usage(
            f"checkpoint expects {params.cfg.height}x{params.cfg.width} images, "
            f"corpus is {tests[0].truth.shape}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    probs = predict_probs(params, np.stack([s.image for s in tests]))
    lines = ["id,dice"]
    for s, p in zip(tests, probs):
        pred = p >= 0.5
        img_u8 = np.round(s.image * 255.0).astype(np.uint8)
        panels = [img_u8, _overlay(img_u8, s.truth), _overlay(img_u8, pred)]
        write_ppm(out / f"{s.id}_viz.ppm", np.concatenate(panels, axis=2))
        lines.append(f"{s.id},{repr(dice_iou(pred, s.truth)[0])}")
    (out / "dice.csv").write_text("\n".join(lines) + "\n")
    click.echo(f"wrote {len(tests)} triptychs to {out}")


if __name__ == "__main__":
    main()
