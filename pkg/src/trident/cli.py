"""Command line entry point: ``trident <command>``.

Every command resolves a :class:`RunSpecFile` (defaults, then ``--config``,
then explicit flags), archives it as ``run_spec.json`` in its output directory
and can be replayed from that file alone.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import click
import numpy as np

from . import desk
from .augment import GeneAugmentConfig
from .config import ConfigError, dump_json, from_dict, merge, to_dict
from .data import FACTORS, SyntheticConfig, generate_synthetic, load_split, write_dataset
from .evaluation import (
    FRACTIONS,
    ProbeConfig,
    evaluate_suite,
    extract_representations,
    gene_correlations,
    gradcam_sum,
    plot_fraction_curves,
    plot_histogram,
    read_results_csv,
    write_heatmap_png,
    write_results_csv,
)
from .losses import ContractError, LossFamily
from .models import BranchTopology, load_checkpoint, save_checkpoint
from .training import TrainMode, TrainRunConfig, pretrain, train_gene_regressor, train_supervised

log = logging.getLogger("trident")

TOPOLOGIES = ["trident", "siamese-priv", "siamese-unpriv", "trident-unpriv"]
EXIT_USER, EXIT_INTERNAL = 1, 2


@dataclass(frozen=True)
class RunSpecFile:
    dataset: str = "data"
    out: str = "runs"
    split: str = "test"
    checkpoint: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainRunConfig = field(default_factory=desk.run_config)
    probe: ProbeConfig = field(default_factory=desk.probe_config)
    tasks: tuple[str, ...] = FACTORS
    fractions: tuple[float, ...] = FRACTIONS
    n_images: int = 8


def _resolve(config: str | None, **overrides) -> RunSpecFile:
    spec = RunSpecFile()
    if config:
        path = Path(config)
        if not path.is_file():
            raise click.UsageError(f"config file {config} not found")
        try:
            user = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config}: not valid JSON ({exc})") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{config}: top level must be a mapping")
        spec = from_dict(RunSpecFile, merge(to_dict(spec), user))
    changes = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(spec, **changes)


def _with_seed(spec: RunSpecFile, seed: int | None) -> RunSpecFile:
    """Route the single ``--seed`` flag into every seeded sub-config."""
    if seed is None:
        return spec
    train = dataclasses.replace(
        spec.train,
        seed=seed,
        encoder=dataclasses.replace(spec.train.encoder, seed=seed),
    )
    return dataclasses.replace(
        spec,
        synthetic=dataclasses.replace(spec.synthetic, seed=seed),
        train=train,
        probe=dataclasses.replace(spec.probe, seed=seed),
    )


def _outdir(spec: RunSpecFile) -> Path:
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _archive(spec: RunSpecFile, out: Path) -> Path:
    return dump_json(spec, out / "run_spec.json")


def _parse_fractions(text: str | None) -> tuple[float, ...] | None:
    if text is None:
        return None
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from None


def _parse_tasks(text: str | None) -> tuple[str, ...] | None:
    return None if text is None else tuple(t.strip() for t in text.split(",") if t.strip())


def _checkpoint(spec: RunSpecFile) -> Path:
    if spec.checkpoint is None:
        raise click.UsageError("a checkpoint is required (argument or 'checkpoint' in --config)")
    path = Path(spec.checkpoint)
    if not path.is_file():
        raise click.UsageError(f"checkpoint {path} not found")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# shared options
config_opt = click.option("--config", type=click.Path(dir_okay=False), default=None, show_default="built-in defaults", help="RunSpecFile JSON; unknown keys are rejected.")
out_opt = click.option("--out", envvar="TRIDENT_OUT", default=None, show_default="runs, or $TRIDENT_OUT", help="Output directory.")
seed_opt = click.option("--seed", type=int, default=None, show_default="from config (0)", help="Seed for every random stream of the command.")
data_opt = click.option("--data", "dataset", default=None, show_default="data", help="Dataset root containing manifest.csv.")


@click.group(context_settings={"help_option_names": ["-h", "--help"], "show_default": True})
@click.option("-v", "--verbose", is_flag=True, default=False, help="Log progress to stderr.")
def cli(verbose: bool) -> None:
    """Privileged-information joint-embedding pretraining and evaluation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@config_opt
@out_opt
@seed_opt
@click.option("--privileged", type=click.Choice(["image", "counts"]), default=None, show_default="image", help="Privileged modality of the synthetic data.")
def synth(config, out, seed, privileged):
    """Generate the synthetic strong/weak-feature dataset."""
    spec = _with_seed(_resolve(config, out=out), seed)
    if privileged is not None:
        spec = dataclasses.replace(spec, synthetic=dataclasses.replace(spec.synthetic, privileged=privileged))
    root = _outdir(spec)
    splits = generate_synthetic(spec.synthetic)
    manifest = write_dataset(splits, root)
    _archive(spec, root)
    for name, arr in splits.items():
        hist = {f: np.bincount(arr.labels[f], minlength=4).tolist() for f in FACTORS}
        click.echo(f"{name}: n={len(arr)} " + " ".join(f"{f}={h}" for f, h in hist.items()))
    click.echo(f"manifest {manifest} sha256={_sha256(manifest)}")


@cli.command(name="pretrain")
@config_opt
@out_opt
@seed_opt
@data_opt
@click.option("--topology", type=click.Choice(TOPOLOGIES), default=None, show_default="trident", help="Branch layout.")
@click.option("--loss", type=click.Choice([f.value for f in LossFamily]), default=None, show_default="vicreg", help="Pair loss family.")
@click.option("--mode", type=click.Choice([m.value for m in TrainMode]), default=None, show_default="ssl_pretrain", help="Joint-embedding pretraining or a head baseline.")
@click.option("--epochs", type=int, default=None, show_default="from config", help="Training epochs.")
def pretrain_cmd(config, out, seed, dataset, topology, loss, mode, epochs):
    """Train an encoder and write checkpoint.ckpt and trace.csv."""
    spec = _with_seed(_resolve(config, out=out, dataset=dataset), seed)
    train_cfg = spec.train
    if topology is not None:
        train_cfg = dataclasses.replace(train_cfg, topology=BranchTopology.named(topology))
    if loss is not None:
        train_cfg = dataclasses.replace(train_cfg, loss=dataclasses.replace(train_cfg.loss, family=LossFamily(loss)))
    if mode is not None:
        train_cfg = dataclasses.replace(train_cfg, mode=TrainMode(mode))
    if epochs is not None:
        train_cfg = dataclasses.replace(train_cfg, epochs=epochs)
    data = load_split(spec.dataset, "train")
    kind = data.privileged_kind
    if kind == "counts" and not isinstance(train_cfg.privileged_aug, GeneAugmentConfig):
        train_cfg = dataclasses.replace(train_cfg, privileged_aug=GeneAugmentConfig())
    elif kind == "image" and isinstance(train_cfg.privileged_aug, GeneAugmentConfig):
        raise ConfigError("gene augmentation configured for image-valued privileged data")
    spec = dataclasses.replace(spec, train=train_cfg)
    root = _outdir(spec)
    _archive(spec, root)

    if train_cfg.mode is TrainMode.SSL_PRETRAIN:
        result = pretrain(data, train_cfg)
    elif train_cfg.mode is TrainMode.SUPERVISED:
        result = train_supervised(data, train_cfg)
    else:
        result = train_gene_regressor(data, train_cfg)
    ckpt = save_checkpoint(root / "checkpoint.ckpt", result.model, {"run_config": to_dict(train_cfg)})
    result.trace.write_csv(root / "trace.csv")
    final = result.trace.steps[-1]["loss"] if result.trace.steps else float("nan")
    click.echo(f"checkpoint {ckpt} final_loss={final:.6g}")


@cli.command()
@click.argument("checkpoint", required=False)
@config_opt
@out_opt
@seed_opt
@data_opt
@click.option("--fractions", default=None, show_default=",".join(str(f) for f in FRACTIONS), help="Comma-separated classifier training fractions.")
@click.option("--tasks", default=None, show_default=",".join(FACTORS), help="Comma-separated label names to probe.")
@click.option("--epochs", type=int, default=None, show_default="from config", help="Probe training epochs.")
def probe(checkpoint, config, out, seed, dataset, fractions, tasks, epochs):
    """Linear-probe a frozen encoder; writes results.csv and fractions.png."""
    spec = _with_seed(
        _resolve(config, out=out, dataset=dataset, checkpoint=checkpoint, fractions=_parse_fractions(fractions), tasks=_parse_tasks(tasks)),
        seed,
    )
    if epochs is not None:
        spec = dataclasses.replace(spec, probe=dataclasses.replace(spec.probe, epochs=epochs))
    ckpt = _checkpoint(spec)
    train, test = load_split(spec.dataset, "train"), load_split(spec.dataset, spec.split)
    root = _outdir(spec)
    _archive(spec, root)
    rows = evaluate_suite({ckpt.stem: ckpt}, train, test, spec.tasks, spec.fractions, spec.probe)
    write_results_csv(rows, root / "results.csv")
    plot_fraction_curves(rows, root / "fractions.png")
    for r in rows:
        click.echo(f"{r['method']},{r['loss']},{r['task']},{r['fraction']},{r['accuracy']:.4f}")


@cli.command()
@click.argument("checkpoint", required=False)
@config_opt
@out_opt
@data_opt
def correlate(checkpoint, config, out, dataset):
    """Per-gene max |Pearson| against representation elements; CSV plus histogram."""
    spec = _resolve(config, out=out, dataset=dataset, checkpoint=checkpoint)
    ckpt = _checkpoint(spec)
    data = load_split(spec.dataset, spec.split)
    if data.privileged_kind != "counts":
        raise click.UsageError("correlate needs a dataset with count-vector privileged data")
    model, _ = load_checkpoint(ckpt)
    root = _outdir(spec)
    _archive(spec, root)
    reps = extract_representations(model.encoder, data, checkpoint_id=_sha256(ckpt)[:16])
    reps.save(root / "representations.f32")
    genes = [f"gene_{i}" for i in range(data.privileged.shape[1])]
    report = gene_correlations(reps.values, data.privileged, genes)
    report.write_csv(root / "correlations.csv")
    plot_histogram(report, root / "histogram.png")
    click.echo(f"genes={len(genes)} median_c={float(np.median(report.scores)):.4f} bins={len(report.bin_counts)}")


@cli.command()
@click.argument("checkpoint", required=False)
@config_opt
@out_opt
@data_opt
@click.option("--n-images", type=int, default=None, show_default="8", help="Number of split images to attribute.")
def attribute(checkpoint, config, out, dataset, n_images):
    """Summed GradCAM heatmaps, one PNG per image."""
    spec = _resolve(config, out=out, dataset=dataset, checkpoint=checkpoint, n_images=n_images)
    ckpt = _checkpoint(spec)
    data = load_split(spec.dataset, spec.split)
    model, _ = load_checkpoint(ckpt)
    root = _outdir(spec)
    _archive(spec, root)
    heat_dir = root / "heatmaps"
    for i in range(min(spec.n_images, len(data))):
        result = gradcam_sum(model.encoder, data.primary[i])
        write_heatmap_png(heat_dir / f"{data.ids[i]}.png", result.heatmap)
    click.echo(f"wrote {min(spec.n_images, len(data))} heatmaps to {heat_dir}")


@cli.command()
@click.argument("results", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@out_opt
def report(results, out):
    """Merge results CSVs into one table, a task-by-method summary and plots."""
    root = Path(out or "runs")
    root.mkdir(parents=True, exist_ok=True)
    rows = [r for path in results for r in read_results_csv(path)]
    write_results_csv(rows, root / "results.csv")
    plot_fraction_curves(rows, root / "fractions.png")
    summary = {}
    for r in rows:
        summary.setdefault((r["method"], r["loss"], r["fraction"]), {})[r["task"]] = r["accuracy"]
    tasks = sorted({r["task"] for r in rows})
    with (root / "summary.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "loss", "fraction", *tasks])
        for (method, loss, frac), accs in sorted(summary.items()):
            writer.writerow([method, loss, frac, *[accs.get(t, "") for t in tasks]])
    click.echo(f"merged {len(rows)} rows into {root / 'results.csv'}")


def main(argv: list[str] | None = None) -> int:
    """Run the CLI and map failures onto exit codes (1 user error, 2 internal error)."""
    try:
        cli.main(args=argv, prog_name="trident", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USER
    except click.ClickException as exc:
        exc.show()
        return EXIT_USER
    except (ContractError, ConfigError, FileNotFoundError, PermissionError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
