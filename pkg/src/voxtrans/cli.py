"""Command-line pipeline: preprocess, synth-data, train, infer, evaluate, ablate, report.

Every command reads an optional YAML config (``--config``); explicit flags
override file values, which override built-in defaults. Commands write into
their own output directory and never modify inputs. The resolved config's
hash is stamped into checkpoints and written reports so any artifact can be
traced back to the exact settings that produced it.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click
import numpy as np

from . import evaluation, training
from .config import (
    ExperimentConfig,
    config_hash,
    config_to_dict,
    derive_seed,
    load_config,
    resolve_seeds,
)
from .errors import AlreadyNormalized, InvalidConfig, MissingCheckpoint, VoxtransError
from .features import make_extractor, make_metric_extractor
from .io import load_manifest, load_volume, save_manifest, save_volume
from .synthdata import SynthSpec, TransformKind, generate_manifest
from .training import AblationFlags, load_checkpoint, run_training
from .volumes import (
    DatasetManifest,
    IntensityDomain,
    compute_population_spacing,
    resample,
    scale_intensity,
)

ABLATION_ROWS = {
    "a": AblationFlags(mr_input=False),
    "b": AblationFlags(mr_output=False),
    "c": AblationFlags(unet_d=False),
    "d": AblationFlags(relativistic=False),
    "e": AblationFlags(),
}

ROW_TITLES = {
    "a": "no multi-resolution input",
    "b": "no multi-resolution output",
    "c": "global discriminator",
    "d": "non-relativistic loss",
    "e": "full model",
}


def _fmt_loss(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _parse_triple(text: str | None) -> tuple[int, int, int] | None:
    """Accept '32' (cube) or '32,48,64' (per-axis)."""
    if text is None:
        return None
    parts = [p.strip() for p in text.split(",") if p.strip()]
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise InvalidConfig(f"bad size {text!r}: expected integers") from exc
    if len(values) == 1:
        values = values * 3
    if len(values) != 3 or any(v < 1 for v in values):
        raise InvalidConfig(f"bad size {text!r}: expected 1 or 3 positive integers")
    return (values[0], values[1], values[2])


def _load_experiment(config_path: str | None) -> tuple[ExperimentConfig, dict]:
    cfg, raw = load_config(config_path)
    return resolve_seeds(cfg, raw), raw


def _write_provenance(out_dir, command: str, cfg: ExperimentConfig, extra: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "command": command,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
    }
    if extra:
        payload.update(extra)
    with open(os.path.join(out_dir, "provenance.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)


def _report_payload(report: evaluation.MetricsReport, cfg: ExperimentConfig) -> dict:
    return {
        "config_hash": config_hash(cfg),
        "per_case": report.per_case,
        "aggregate": report.aggregate,
    }


def _perception_fx(cfg: ExperimentConfig):
    seed = derive_seed(cfg.seed, "features")
    return make_extractor(cfg.loss.perception_backbone, cfg.loss.perception_weights, seed), seed


def _metric_fx(cfg: ExperimentConfig):
    seed = derive_seed(cfg.seed, "metric")
    return make_metric_extractor(cfg.eval.metric_backbone, cfg.eval.metric_weights, seed)


@click.group()
def cli():
    """Guided multi-resolution 3D volume-to-volume translation."""


# ---------------------------------------------------------------------------
# preprocess


@cli.command("preprocess")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option(
    "--spacing-from-train-only/--spacing-from-all",
    default=None,
    help="Average voxel spacing over TRAIN cases only, or over every case.",
)
def cmd_preprocess(manifest_path, out_dir, config_path, spacing_from_train_only):
    """Scale intensities into [0, 1] and resample onto the population spacing.

    Refuses volumes that are already normalized, so running preprocess on its
    own output fails loudly instead of silently rescaling twice.
    """
    cfg, _ = _load_experiment(config_path)
    train_only = (
        cfg.data.spacing_from_train_only
        if spacing_from_train_only is None
        else spacing_from_train_only
    )
    manifest = load_manifest(manifest_path)
    spacing = compute_population_spacing(manifest, train_only=train_only)
    os.makedirs(out_dir, exist_ok=True)

    new_cases = []
    for case in manifest.cases:
        new_paths = {}
        for role in ("source", "target"):
            vol = load_volume(getattr(case, role))
            if vol.intensity_domain is IntensityDomain.UNIT:
                raise AlreadyNormalized(
                    f"{case.case_id} {role} is already in the unit intensity domain; "
                    "preprocess expects native-intensity volumes"
                )
            vol = resample(scale_intensity(vol), spacing)
            fname = f"{case.case_id}_{role}.nii.gz"
            save_volume(vol, os.path.join(out_dir, fname))
            new_paths[role] = fname
        label_name = None
        if case.label:
            lab = resample(load_volume(case.label), spacing)
            lab = lab.with_data(np.rint(lab.data))
            label_name = f"{case.case_id}_label.nii.gz"
            save_volume(lab, os.path.join(out_dir, label_name))
        new_cases.append(
            dataclasses.replace(
                case, source=new_paths["source"], target=new_paths["target"], label=label_name
            )
        )

    out_manifest = DatasetManifest(cases=tuple(new_cases), split=dict(manifest.split))
    manifest_out = os.path.join(out_dir, "manifest.csv")
    save_manifest(out_manifest, manifest_out)
    _write_provenance(
        out_dir, "preprocess", cfg, {"population_spacing": list(spacing)}
    )
    click.echo(f"preprocessed {len(new_cases)} cases -> {manifest_out}")
    click.echo(f"population spacing: {spacing}")


# ---------------------------------------------------------------------------
# synth-data


@cli.command("synth-data")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--n-cases", type=int, default=None)
@click.option("--size", default=None, help="Volume size, e.g. '64' or '64,64,64'.")
@click.option(
    "--transform",
    type=click.Choice([t.value for t in TransformKind], case_sensitive=False),
    default=None,
)
@click.option("--noise-sigma", type=float, default=None)
@click.option("--smooth-sigma", type=float, default=None)
@click.option("--seed", type=int, default=None)
def cmd_synth_data(out_dir, config_path, n_cases, size, transform, noise_sigma, smooth_sigma, seed):
    """Generate a paired two-modality dataset with segmentation labels."""
    cfg, _ = _load_experiment(config_path)
    s = cfg.data.synth
    spec = SynthSpec(
        size=_parse_triple(size) or s.size,
        num_blobs=s.num_blobs,
        blob_radius=s.blob_radius,
        noise_sigma=s.noise_sigma if noise_sigma is None else noise_sigma,
        transform=TransformKind(transform.upper()) if transform else TransformKind(s.transform),
        smooth_sigma=s.smooth_sigma if smooth_sigma is None else smooth_sigma,
        seed=s.seed if seed is None else seed,
    )
    count = s.n_cases if n_cases is None else n_cases
    manifest = generate_manifest(count, spec, out_dir)
    _write_provenance(
        out_dir,
        "synth-data",
        cfg,
        {"n_cases": count, "spec": {**dataclasses.asdict(spec), "transform": spec.transform.value}},
    )
    click.echo(
        f"generated {len(manifest.cases)} cases "
        f"({len(manifest.train_cases)} train / {len(manifest.test_cases)} test) in {out_dir}"
    )


# ---------------------------------------------------------------------------
# train


def _apply_train_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    train = cfg.train
    updates = {}
    for field in ("batch_size", "epochs", "steps_per_epoch", "max_steps", "lr", "seed"):
        if kw.get(field) is not None:
            updates[field] = kw[field]
    if kw.get("patch_size") is not None:
        updates["patch_size"] = kw["patch_size"]
    if kw.get("ablation_row") is not None:
        updates["ablation"] = ABLATION_ROWS[kw["ablation_row"]]
    if updates:
        train = dataclasses.replace(train, **updates)
    return dataclasses.replace(cfg, train=train)


@cli.command("train")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--patch-size", default=None, help="Training patch size, e.g. '96' or '96,96,96'.")
@click.option("--epochs", type=int, default=None)
@click.option("--steps-per-epoch", type=int, default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option(
    "--ablation-row",
    type=click.Choice(sorted(ABLATION_ROWS)),
    default=None,
    help="Train one labeled ablation variant instead of the full model.",
)
def cmd_train(manifest_path, out_dir, config_path, batch_size, patch_size, epochs,
              steps_per_epoch, max_steps, lr, seed, ablation_row):
    """Adversarially train the translation model on the manifest's TRAIN split."""
    cfg, _ = _load_experiment(config_path)
    cfg = _apply_train_overrides(
        cfg,
        batch_size=batch_size,
        patch_size=_parse_triple(patch_size),
        epochs=epochs,
        steps_per_epoch=steps_per_epoch,
        max_steps=max_steps,
        lr=lr,
        seed=seed,
        ablation_row=ablation_row,
    )
    manifest = load_manifest(manifest_path)
    fx, fx_seed = _perception_fx(cfg)
    _write_provenance(out_dir, "train", cfg, {"manifest": str(manifest_path)})
    state, metrics = run_training(
        cfg.train,
        manifest,
        out_dir,
        gen_config=cfg.model_g,
        disc_config=cfg.model_d,
        weights=cfg.loss.weights(),
        fx=fx,
        fx_kind=cfg.loss.perception_backbone,
        fx_seed=fx_seed,
        config_hash=config_hash(cfg),
    )
    click.echo(f"trained {state.step} steps -> {state.last_checkpoint}")
    if metrics:
        last = metrics[-1]
        click.echo(
            f"final losses: G={_fmt_loss(last['l_g_total'])} D={_fmt_loss(last['l_d'])} "
            f"(voxel={_fmt_loss(last['l_voxel'])})"
        )


# ---------------------------------------------------------------------------
# infer


def _load_generator(checkpoint_path):
    if not os.path.exists(checkpoint_path):
        raise MissingCheckpoint(f"no checkpoint at {checkpoint_path}")
    state = load_checkpoint(checkpoint_path)
    state.generator.eval()
    return state.generator


@cli.command("infer")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--patch-size", default=None, help="Sliding-window tile size.")
@click.option("--overlap", type=float, default=None)
@click.option("--sigma-scale", type=float, default=None)
def cmd_infer(checkpoint_path, input_path, output_path, config_path,
              patch_size, overlap, sigma_scale):
    """Translate one whole volume with Gaussian-blended sliding windows."""
    cfg, _ = _load_experiment(config_path)
    patch = _parse_triple(patch_size) or cfg.infer.patch_size
    ov = cfg.infer.overlap if overlap is None else overlap
    sig = cfg.infer.sigma_scale if sigma_scale is None else sigma_scale
    gen = _load_generator(checkpoint_path)
    vol = load_volume(input_path)
    out = evaluation.translate_volume(gen, vol, patch, ov, sig)
    out_dir = os.path.dirname(os.path.abspath(output_path))
    os.makedirs(out_dir, exist_ok=True)
    save_volume(out, output_path)
    click.echo(f"translated {vol.dims} volume -> {output_path}")


# ---------------------------------------------------------------------------
# evaluate


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--patch-size", default=None)
@click.option("--overlap", type=float, default=None)
def cmd_evaluate(checkpoint_path, manifest_path, out_dir, config_path, patch_size, overlap):
    """Score translations of the TEST split: SSIM, PSNR, NMSE, LPIPS."""
    cfg, _ = _load_experiment(config_path)
    patch = _parse_triple(patch_size) or cfg.infer.patch_size
    ov = cfg.infer.overlap if overlap is None else overlap
    gen = _load_generator(checkpoint_path)
    manifest = load_manifest(manifest_path)
    report = evaluation.evaluate_translation(
        gen, manifest, _metric_fx(cfg), patch, ov, cfg.infer.sigma_scale
    )
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(_report_payload(report, cfg), f, indent=2)
    table = evaluation.render_table(report, title=f"test metrics ({len(report.per_case)} cases)")
    with open(os.path.join(out_dir, "table.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    _write_provenance(out_dir, "evaluate", cfg, {"checkpoint": str(checkpoint_path)})
    click.echo(table)


# ---------------------------------------------------------------------------
# ablate


def _flag_cells(flags: AblationFlags) -> dict:
    return {
        "mr_input": flags.mr_input,
        "mr_output": flags.mr_output,
        "unet_d": flags.unet_d,
        "relativistic": flags.relativistic,
    }


def render_ablation_table(rows: list[dict]) -> str:
    """Five-row leave-one-out table: flag matrix plus mean metrics per row."""
    cols = ["row", "MR-in", "MR-out", "UNet-D", "Rel", "SSIM↑", "PSNR↑", "NMSE↓", "LPIPS↓"]
    widths = [28, 6, 7, 7, 4, 16, 16, 16, 16]
    lines = ["  ".join(f"{c:>{w}}" for c, w in zip(cols, widths))]
    for row in rows:
        flags = row["flags"]
        cells = [f"({row['row']}) {ROW_TITLES[row['row']]}"]
        for key in ("mr_input", "mr_output", "unet_d", "relativistic"):
            cells.append("yes" if flags[key] else "no")
        for metric in ("ssim", "psnr", "nmse", "lpips"):
            agg = row["aggregate"].get(metric)
            cells.append("-" if agg is None else f"{agg['mean']:.4f} ± {agg['std']:.4f}")
        lines.append("  ".join(f"{c:>{w}}" for c, w in zip(cells, widths)))
    return "\n".join(lines)


def run_ablation(
    cfg: ExperimentConfig,
    manifest: DatasetManifest,
    out_dir,
    seeds: list[int],
) -> dict:
    """Train and evaluate all five ablation rows for every seed.

    Each (row, seed) run lands in its own subdirectory with its own report;
    finished runs are detected and reused, so an interrupted sweep resumes
    where it stopped.
    """
    fx, fx_seed = _perception_fx(cfg)
    fx_metric = _metric_fx(cfg)
    rows = []
    for row_key in sorted(ABLATION_ROWS):
        flags = ABLATION_ROWS[row_key]
        per_seed = {}
        for seed in seeds:
            run_dir = os.path.join(out_dir, f"row_{row_key}", f"seed_{seed}")
            report_path = os.path.join(run_dir, "report.json")
            if os.path.exists(report_path):
                with open(report_path, "r", encoding="utf-8") as f:
                    per_seed[str(seed)] = json.load(f)["aggregate"]
                continue
            train_cfg = dataclasses.replace(cfg.train, seed=seed, ablation=flags)
            run_cfg = dataclasses.replace(cfg, train=train_cfg)
            run_training(
                train_cfg,
                manifest,
                run_dir,
                gen_config=cfg.model_g,
                disc_config=cfg.model_d,
                weights=cfg.loss.weights(),
                fx=fx,
                fx_kind=cfg.loss.perception_backbone,
                fx_seed=fx_seed,
                config_hash=config_hash(run_cfg),
            )
            gen = _load_generator(os.path.join(run_dir, "checkpoint.pt"))
            report = evaluation.evaluate_translation(
                gen,
                manifest,
                fx_metric,
                cfg.infer.patch_size,
                cfg.infer.overlap,
                cfg.infer.sigma_scale,
            )
            with open(report_path, "w", encoding="utf-8") as f:
                json.dump(_report_payload(report, run_cfg), f, indent=2)
            per_seed[str(seed)] = report.aggregate

        metrics = sorted({m for agg in per_seed.values() for m in agg})
        aggregate = {}
        for m in metrics:
            means = [agg[m]["mean"] for agg in per_seed.values() if m in agg]
            aggregate[m] = {
                "mean": float(np.mean(means)),
                "std": float(np.std(means)),
                "count": len(means),
            }
        rows.append(
            {
                "row": row_key,
                "title": ROW_TITLES[row_key],
                "flags": _flag_cells(ABLATION_ROWS[row_key]),
                "per_seed": per_seed,
                "aggregate": aggregate,
            }
        )
    return {"config_hash": config_hash(cfg), "seeds": seeds, "rows": rows}


@cli.command("ablate")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seeds", default=None, help="Comma-separated seeds, e.g. '0,1,2'.")
def cmd_ablate(manifest_path, out_dir, config_path, seeds):
    """Leave-one-out sweep over the four design choices, rows (a) through (e)."""
    cfg, _ = _load_experiment(config_path)
    if seeds:
        try:
            seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise InvalidConfig(f"bad --seeds {seeds!r}: expected integers") from exc
        if not seed_list:
            raise InvalidConfig("--seeds must name at least one seed")
    else:
        seed_list = [cfg.train.seed]
    manifest = load_manifest(manifest_path)
    result = run_ablation(cfg, manifest, out_dir, seed_list)
    with open(os.path.join(out_dir, "ablation_report.json"), "w", encoding="utf-8") as f:
        json.dump(result, f, indent=2)
    table = render_ablation_table(result["rows"])
    with open(os.path.join(out_dir, "table.txt"), "w", encoding="utf-8") as f:
        f.write(table + "\n")
    _write_provenance(out_dir, "ablate", cfg, {"seeds": seed_list})
    click.echo(table)


# ---------------------------------------------------------------------------
# report


def _summarize_run(run_dir: str) -> tuple[str, str]:
    """Render whatever artifacts a run directory holds, verbatim."""
    eval_report = os.path.join(run_dir, "report.json")
    ablation_report = os.path.join(run_dir, "ablation_report.json")
    metrics_log = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(ablation_report):
        with open(ablation_report, "r", encoding="utf-8") as f:
            payload = json.load(f)
        return "ablation", render_ablation_table(payload["rows"])
    if os.path.exists(eval_report):
        with open(eval_report, "r", encoding="utf-8") as f:
            payload = json.load(f)
        report = evaluation.MetricsReport(
            per_case=payload["per_case"], aggregate=payload["aggregate"]
        )
        return "evaluation", evaluation.render_table(report)
    if os.path.exists(metrics_log):
        with open(metrics_log, "r", encoding="utf-8") as f:
            steps = [json.loads(line) for line in f if line.strip()]
        if not steps:
            return "training", "no steps logged"
        last = steps[-1]
        return "training", (
            f"{len(steps)} steps, final G={_fmt_loss(last['l_g_total'])} "
            f"D={_fmt_loss(last['l_d'])} voxel={_fmt_loss(last['l_voxel'])} "
            f"lr={last['lr']:.2e}"
        )
    raise InvalidConfig(f"{run_dir}: no report.json, ablation_report.json, or metrics.jsonl")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path())
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Also write the combined summary to this file.")
def cmd_report(run_dirs, out_path):
    """Merge run artifacts into one summary without recomputing anything."""
    blocks = []
    for run_dir in run_dirs:
        kind, body = _summarize_run(run_dir)
        blocks.append(f"== {run_dir} ({kind}) ==\n{body}")
    combined = "\n\n".join(blocks)
    if out_path:
        os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(combined + "\n")
    click.echo(combined)


def main(argv=None) -> int:
    """Console entry point mapping domain errors onto stable exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except VoxtransError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(130)
    return 0


if __name__ == "__main__":
    sys.exit(main())
