"""Command-line interface.

Subcommands cover the whole workflow: synthesize a dataset, train, produce
zero-shot predictions, score them, run the two ablations, and render a report
with figures next to the delimited outputs.

Exit codes: 0 on success, 2 for configuration and usage mistakes, 1 for
runtime failures (corrupt files, contract violations, undefined metrics).
"""

from __future__ import annotations

import functools
import hashlib
import json
from pathlib import Path

import click
import yaml

from .checkpoint import CheckpointError
from .core import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    PathologySet,
)
from .data import (
    SplitSpec,
    generate_synthetic_dataset,
    linear_probe_auc,
    load_dataset,
    load_images,
    split,
)
from .encoders import build_vocabulary
from .evaluation import (
    REFERENCE_NAMES,
    UndefinedMetricError,
    align_rows,
    compare,
    evaluate,
    load_reference_table,
    roc_curve_points,
)
from .figures import (
    plot_auc_bars,
    plot_comparison_bars,
    plot_roc_curves,
    plot_training_curves,
    read_metrics_log,
)
from .inference import read_zero_shot_csv
from .losses import LossConfig
from .reports import load_template_table
from .trainer import (
    BEST_CHECKPOINT,
    FINAL_CHECKPOINT,
    METRICS_LOG,
    TrainConfig,
    classify_images,
    evaluate_zero_shot,
    load_state,
    prepare,
    run_batch_ablation,
    run_loss_ablation,
    train,
)

SPLIT_NAMES = ("train", "val", "test", "all")

_LOSS_YAML_KEYS = {"config_id", "aux_weight", "tau_clip", "tau_moco",
                   "use_text_queue"}


def friendly_errors(f):
    """Map library exceptions onto the CLI exit-code contract."""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except ConfigurationError as exc:
            raise click.UsageError(str(exc)) from exc
        except (ContractViolationError, CheckpointError, UndefinedMetricError,
                DegenerateInputError, OSError) as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def _loss_from_mapping(raw: dict) -> LossConfig:
    unknown = set(raw) - _LOSS_YAML_KEYS
    if unknown:
        raise ConfigurationError(
            f"unknown loss config keys: {sorted(unknown)} "
            f"(allowed: {sorted(_LOSS_YAML_KEYS)})"
        )
    raw = dict(raw)
    config_id = raw.pop("config_id", "A")
    return LossConfig.from_id(config_id, **raw)


def load_run_config(path: str | Path | None) -> tuple[TrainConfig, str | None]:
    """Parse the YAML run config into (TrainConfig, templates path or None).

    Unknown keys are rejected outright; a typo must never silently fall back
    to a default.
    """
    if path is None:
        return TrainConfig(), None
    raw = yaml.safe_load(Path(path).read_text())
    if raw is None:
        return TrainConfig(), None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"run config {path} is not a mapping")
    templates = raw.pop("templates", None)
    if isinstance(raw.get("loss"), dict):
        raw["loss"] = _loss_from_mapping(raw["loss"])
    config = TrainConfig.from_dict(raw)
    return config, templates


def _apply_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    """Apply non-None CLI overrides on top of the YAML/default config."""
    import dataclasses

    loss = config.loss
    loss_id = overrides.pop("loss_config", None)
    aux_weight = overrides.pop("aux_weight", None)
    if loss_id is not None:
        loss = LossConfig.from_id(
            loss_id, aux_weight=loss.aux_weight,
            tau_clip=loss.tau_clip, tau_moco=loss.tau_moco,
            use_text_queue=loss.use_text_queue,
        )
    if aux_weight is not None:
        loss = dataclasses.replace(loss, aux_weight=aux_weight)
    updates = {k: v for k, v in overrides.items() if v is not None}
    if loss is not config.loss:
        updates["loss"] = loss
    return dataclasses.replace(config, **updates) if updates else config


def _run_id(config: TrainConfig, pathologies: PathologySet,
            templates_hash: str) -> str:
    canonical = json.dumps({
        "config": config.to_dict(),
        "pathologies": list(pathologies.names),
        "templates": templates_hash,
    }, sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _load_split_images(data_dir: Path, name: str):
    """(manifest, meta, images) for one named split of a dataset directory."""
    manifest, meta = load_dataset(data_dir)
    if name == "all":
        part = manifest
    else:
        part = split(manifest, SplitSpec(), meta.seed)[name]
    return part, meta, load_images(data_dir, part)


@click.group()
@click.version_option(package_name="moclip")
def cli():
    """Contrastive image-text pretraining with a momentum key queue."""


@cli.command("synth-data")
@click.option("--n", type=int, required=True, help="Number of images.")
@click.option("--pathologies", "n_diseases", type=int, default=None,
              help="Use only the first N diseases of the default panel.")
@click.option("--size", type=int, default=64, show_default=True,
              help="Image side length in pixels.")
@click.option("--prevalence", type=float, default=0.2, show_default=True,
              help="Per-disease Bernoulli prevalence.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(path_type=Path), required=True)
@friendly_errors
def synth_data(n, n_diseases, size, prevalence, seed, out_dir):
    """Generate a synthetic labeled image dataset."""
    manifest = generate_synthetic_dataset(
        out_dir, n, n_diseases=n_diseases, image_size=size,
        prevalence=prevalence, seed=seed,
    )
    click.echo(f"wrote {len(manifest)} images to {out_dir}")
    click.echo(f"pathologies: {', '.join(manifest.pathologies.names)}")


def _train_options(f):
    f = click.option("--config", "config_path",
                     type=click.Path(exists=True, path_type=Path),
                     default=None, help="YAML run config.")(f)
    f = click.option("--loss-config", type=click.Choice(["A", "B", "C", "D"]),
                     default=None, help="Loss configuration id.")(f)
    f = click.option("--batch-size", type=int, default=None)(f)
    f = click.option("--momentum", type=float, default=None)(f)
    f = click.option("--queue-capacity", type=int, default=None)(f)
    f = click.option("--seed", type=int, default=None)(f)
    f = click.option("--epochs", type=int, default=None)(f)
    f = click.option("--lr", type=float, default=None)(f)
    f = click.option("--weight-decay", type=float, default=None)(f)
    f = click.option("--aux-weight", type=float, default=None)(f)
    f = click.option("--image-size", type=int, default=None)(f)
    f = click.option("--embed-dim", type=int, default=None)(f)
    f = click.option("--templates", "templates_path",
                     type=click.Path(exists=True, path_type=Path),
                     default=None, help="Template table JSON.")(f)
    f = click.option("--run-root", type=click.Path(path_type=Path),
                     envvar="MOCLIP_RUN_ROOT", default=Path("runs"),
                     show_default=True, help="Directory holding run dirs "
                     "(env: MOCLIP_RUN_ROOT).")(f)
    return f


def _build_config(config_path, templates_path, **overrides):
    config, yaml_templates = load_run_config(config_path)
    config = _apply_overrides(config, **overrides)
    templates = templates_path if templates_path is not None else yaml_templates
    table = load_template_table(templates)
    return config, table


@cli.command("train")
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@_train_options
@click.option("--run-id", default=None,
              help="Run directory name; defaults to a config hash.")
@click.option("--resume", is_flag=True,
              help="Continue from the run's final checkpoint.")
@friendly_errors
def train_cmd(data_dir, config_path, templates_path, run_root, run_id, resume,
              **overrides):
    """Train on a dataset directory and checkpoint into a run directory."""
    config, table = _build_config(config_path, templates_path, **overrides)
    manifest, meta = load_dataset(data_dir)
    pathologies = manifest.pathologies
    table.require(pathologies)

    splits = split(manifest, SplitSpec(), meta.seed)
    vocab = build_vocabulary(table)
    train_images = load_images(data_dir, splits["train"])
    val_images = load_images(data_dir, splits["val"])
    train_data = prepare(splits["train"], train_images, table, vocab,
                         config.seed, config.max_len,
                         config.shuffle_report_sentences)
    val_data = (prepare(splits["val"], val_images, table, vocab, config.seed,
                        config.max_len, config.shuffle_report_sentences)
                if len(splits["val"]) else None)

    if run_id is None:
        run_id = _run_id(config, pathologies, table.content_hash())
    run_dir = Path(run_root) / run_id
    final_ckpt = run_dir / FINAL_CHECKPOINT
    resume_from = None
    if resume:
        if not final_ckpt.exists():
            raise ConfigurationError(
                f"--resume given but {final_ckpt} does not exist"
            )
        resume_from = final_ckpt
    elif final_ckpt.exists():
        raise ConfigurationError(
            f"run directory {run_dir} already has a checkpoint; "
            "pass --resume to continue it or --run-id for a fresh run"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "run.json", "w") as fh:
        json.dump({
            "run_id": run_id,
            "data_dir": str(Path(data_dir).resolve()),
            "config": config.to_dict(),
            "pathologies": list(pathologies.names),
            "templates_hash": table.content_hash(),
        }, fh, indent=2)
        fh.write("\n")

    result = train(config, train_data, val_data, run_dir, pathologies, table,
                   resume_from=resume_from)
    history = read_metrics_log(run_dir / METRICS_LOG)
    if history:
        plot_training_curves(history, run_dir / "training-curves.png")
    click.echo(f"run_dir: {run_dir}")
    click.echo(f"final checkpoint: {result.final_path}")
    if result.best_path is not None:
        click.echo(f"best checkpoint: {result.best_path} "
                   f"(val macro AUC {result.best_val_auc:.4f})")


@cli.command()
@click.option("--ckpt", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--split", "split_name", type=click.Choice(SPLIT_NAMES),
              default="test", show_default=True)
@click.option("--tau", type=float, default=1.0, show_default=True,
              help="Inference temperature.")
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Long-format predictions CSV.")
@click.option("--wide", is_flag=True, help="Also write a wide-format CSV.")
@friendly_errors
def zeroshot(ckpt, data_dir, split_name, tau, out, wide):
    """Write zero-shot presence probabilities for a dataset split."""
    state = load_state(ckpt)
    part, _, images = _load_split_images(Path(data_dir), split_name)
    result = classify_images(state, images, ids=part.ids(), tau=tau)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.write_csv(out)
    click.echo(f"wrote {len(result.ids)} x {len(result.pathology_names)} "
               f"predictions to {out}")
    if wide:
        wide_path = out.with_name(out.stem + "-wide" + out.suffix)
        result.write_wide_csv(wide_path)
        click.echo(f"wrote wide predictions to {wide_path}")


@cli.command("eval")
@click.option("--ckpt", type=click.Path(exists=True, path_type=Path),
              default=None, help="Checkpoint to classify with.")
@click.option("--predictions", type=click.Path(exists=True, path_type=Path),
              default=None, help="Precomputed long-format predictions CSV.")
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--split", "split_name", type=click.Choice(SPLIT_NAMES),
              default="test", show_default=True)
@click.option("--tau", type=float, default=1.0, show_default=True)
@click.option("--out-dir", type=click.Path(path_type=Path), required=True)
@friendly_errors
def eval_cmd(ckpt, predictions, data_dir, split_name, tau, out_dir):
    """Score predictions (computed or precomputed) against split labels."""
    if (ckpt is None) == (predictions is None):
        raise ConfigurationError("pass exactly one of --ckpt or --predictions")
    part, _, images = _load_split_images(Path(data_dir), split_name)
    out_dir.mkdir(parents=True, exist_ok=True)

    if ckpt is not None:
        state = load_state(ckpt)
        result = classify_images(state, images, ids=part.ids(), tau=tau)
        result.write_csv(out_dir / "predictions.csv")
    else:
        result = read_zero_shot_csv(predictions, tau=tau)

    names = tuple(part.pathologies.names)
    if result.pathology_names != names:
        raise ContractViolationError(
            f"prediction pathologies {list(result.pathology_names)} do not "
            f"match dataset pathologies {list(names)}"
        )
    order = align_rows(part.ids(), list(result.ids))
    scores = result.probabilities[order]
    scored = evaluate(part.label_matrix(), scores, part.pathologies)

    with open(out_dir / "evaluation.json", "w") as fh:
        fh.write(scored.to_json() + "\n")
    table_text = compare({"this run": scored.per_pathology})
    (out_dir / "evaluation.txt").write_text(table_text)
    plot_auc_bars(scored.per_pathology, out_dir / "auc-bars.png",
                  title=f"Zero-shot ROC-AUC ({split_name})")
    curves = {}
    labels = part.label_matrix()
    for j, name in enumerate(names):
        if name in scored.per_pathology:
            curves[name] = roc_curve_points(labels[:, j], scores[:, j])
    plot_roc_curves(curves, out_dir / "roc-curves.png",
                    title=f"ROC curves ({split_name})")
    click.echo(table_text.rstrip())
    click.echo(f"macro AUC: {scored.macro_auc:.4f} "
               f"(diseases only: {scored.macro_auc_diseases:.4f})")
    click.echo(f"outputs in {out_dir}")


@cli.command()
@click.option("--kind", type=click.Choice(["loss", "batch"]), required=True)
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@_train_options
@click.option("--out-dir", type=click.Path(path_type=Path), default=None,
              help="Defaults to <run-root>/ablate-<kind>-<hash>.")
@friendly_errors
def ablate(kind, data_dir, config_path, templates_path, run_root, out_dir,
           **overrides):
    """Run the loss-configuration or batch-size ablation."""
    config, table = _build_config(config_path, templates_path, **overrides)
    manifest, meta = load_dataset(data_dir)
    pathologies = manifest.pathologies
    table.require(pathologies)
    splits = split(manifest, SplitSpec(), meta.seed)
    vocab = build_vocabulary(table)
    parts = {}
    for name in ("train", "val", "test"):
        images = load_images(data_dir, splits[name])
        parts[name] = prepare(splits[name], images, table, vocab, config.seed,
                              config.max_len, config.shuffle_report_sentences)
    val_data = parts["val"] if len(parts["val"]) else None

    if out_dir is None:
        tag = _run_id(config, pathologies, table.content_hash())
        out_dir = Path(run_root) / f"ablate-{kind}-{tag}"
    out_dir.mkdir(parents=True, exist_ok=True)

    if kind == "loss":
        result = run_loss_ablation(config, parts["train"], val_data,
                                   parts["test"], out_dir, pathologies, table)
        (out_dir / "loss-ablation.csv").write_text(result.to_csv())
        text = result.render_text()
        (out_dir / "loss-ablation.txt").write_text(text)
        plot_auc_bars({cid: auc for cid, _, auc in result.rows},
                      out_dir / "loss-ablation.png",
                      title="Mean zero-shot AUC by loss configuration")
    else:
        result = run_batch_ablation(config, parts["train"], val_data,
                                    parts["test"], out_dir, pathologies, table)
        (out_dir / "batch-ablation.csv").write_text(result.to_csv())
        with open(out_dir / "batch-ablation-meta.json", "w") as fh:
            json.dump(result.metadata(), fh, indent=2)
            fh.write("\n")
        text = result.render_text()
        (out_dir / "batch-ablation.txt").write_text(text)
        plot_comparison_bars(
            {f"bs={s}": {n: by[s] for n, by in result.per_pathology.items()}
             for s in result.sizes},
            out_dir / "batch-ablation.png",
            title="Per-pathology zero-shot AUC by batch size")
    click.echo(text.rstrip())
    click.echo(f"outputs in {out_dir}")


@cli.command()
@click.option("--run-dir", "run_dirs", type=click.Path(exists=True, path_type=Path),
              required=True, multiple=True,
              help="A completed training run directory; repeat to compare runs.")
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--split", "split_name", type=click.Choice(SPLIT_NAMES),
              default="test", show_default=True)
@click.option("--reference", type=click.Choice(REFERENCE_NAMES),
              default="nih", show_default=True,
              help="Published reference table to compare against.")
@click.option("--out-dir", type=click.Path(path_type=Path), default=None,
              help="Defaults to <first run dir>/report.")
@friendly_errors
def report(run_dirs, data_dir, split_name, reference, out_dir):
    """Render an evaluation report with figures for finished runs.

    With several --run-dir values the report is one side-by-side table over
    the shared pathologies, published reference columns included.
    """
    run_dirs = [Path(d) for d in run_dirs]
    out_dir = Path(out_dir) if out_dir is not None else run_dirs[0] / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    part, _, images = _load_split_images(Path(data_dir), split_name)
    labels = part.label_matrix()
    single = len(run_dirs) == 1

    def tagged(name: str, run: str) -> str:
        return name if single else f"{Path(name).stem}-{run}{Path(name).suffix}"

    names, scores = [], {}
    for run_dir in run_dirs:
        name = run_dir.name
        while name in scores:
            name += "'"
        ckpt = run_dir / BEST_CHECKPOINT
        if not ckpt.exists():
            ckpt = run_dir / FINAL_CHECKPOINT
        if not ckpt.exists():
            raise ConfigurationError(f"{run_dir} has no checkpoint to report on")
        state = load_state(ckpt)
        result = classify_images(state, images, ids=part.ids())
        result.write_csv(out_dir / tagged("predictions.csv", name))
        scored = evaluate(labels, result.probabilities, part.pathologies)
        names.append((name, run_dir, ckpt, scored))
        scores[name] = result

        metrics_path = run_dir / METRICS_LOG
        if metrics_path.exists():
            history = read_metrics_log(metrics_path)
            if history:
                plot_training_curves(
                    history, out_dir / tagged("training-curves.png", name))
        plot_auc_bars(scored.per_pathology,
                      out_dir / tagged("auc-bars.png", name),
                      title=f"Zero-shot ROC-AUC ({split_name}, {name})")
        curves = {}
        for j, pathology in enumerate(part.pathologies.names):
            if pathology in scored.per_pathology:
                curves[pathology] = roc_curve_points(
                    labels[:, j], result.probabilities[:, j])
        plot_roc_curves(curves, out_dir / tagged("roc-curves.png", name),
                        title=f"ROC curves ({split_name}, {name})")

    shared = [p for p in names[0][3].per_pathology
              if all(p in scored.per_pathology for _, _, _, scored in names)]
    ref = load_reference_table(reference)
    ref_names = set(ref.pathology_names())
    tables = {name: {p: scored.per_pathology[p] for p in shared}
              for name, _, _, scored in names}
    comparison = None
    ref_shared = [p for p in shared if p in ref_names]
    if ref_shared:
        tables = {name: {p: vals[p] for p in ref_shared}
                  for name, vals in tables.items()}
        for variant, values in ref.variants.items():
            tables[variant] = {p: values[p] for p in ref_shared}
        shared = ref_shared
    if shared:
        comparison = compare(tables)
        with open(out_dir / "comparison.csv", "w") as fh:
            fh.write("pathology," + ",".join(tables) + "\n")
            for p in shared:
                fh.write(p + "," +
                         ",".join(f"{tables[v][p]:.17g}" for v in tables) + "\n")
        plot_comparison_bars(tables, out_dir / "comparison-bars.png",
                             title="Zero-shot AUC comparison")

    lines = []
    for name, run_dir, ckpt, scored in names:
        lines += [
            f"Run: {name} ({run_dir})",
            f"Checkpoint: {ckpt.name}",
            f"Split: {split_name} ({scored.n_samples} samples)",
            f"Macro AUC: {scored.macro_auc:.4f}",
            f"Macro AUC (diseases only): {scored.macro_auc_diseases:.4f}",
        ]
        if scored.skipped:
            lines.append(f"Skipped (single-class): {', '.join(scored.skipped)}")
        lines.append("")
    if comparison is not None:
        lines += [f"Per-pathology zero-shot ROC-AUC; published columns "
                  f"({ref.dataset}) describe real chest X-ray data and are "
                  "context, not a target for this synthetic setup:",
                  comparison.rstrip()]
    else:
        lines += ["Per-pathology zero-shot ROC-AUC",
                  compare({name: scored.per_pathology
                           for name, _, _, scored in names}).rstrip()]
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    click.echo("\n".join(lines))
    click.echo(f"\nreport written to {out_dir}")


@cli.command("probe")
@click.option("--data-dir", type=click.Path(exists=True, path_type=Path),
              required=True)
@click.option("--image-size", type=int, default=32, show_default=True)
@friendly_errors
def probe(data_dir, image_size):
    """Linear-probe learnability gate: ridge regression on raw pixels."""
    data_dir = Path(data_dir)
    manifest, meta = load_dataset(data_dir)
    splits = split(manifest, SplitSpec(), meta.seed)
    train_images = load_images(data_dir, splits["train"])
    val_images = load_images(data_dir, splits["val"])
    aucs = linear_probe_auc(
        train_images, splits["train"].label_matrix(),
        val_images, splits["val"].label_matrix(),
        manifest.pathologies, image_size=image_size,
    )
    for name, auc in aucs.items():
        click.echo(f"{name}: {auc:.4f}")
    if aucs:
        click.echo(f"min: {min(aucs.values()):.4f}  "
                   f"mean: {sum(aucs.values()) / len(aucs):.4f}")


main = cli

if __name__ == "__main__":
    main()
