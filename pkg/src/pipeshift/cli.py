"""Command-line surface.

Verbs: gen-phantoms, attack, eval-zeroshot, ablate-stages, ablate-budget,
repair-train, repair-eval, report, verify-archive. Config files are JSON;
common flags override config fields. Exit codes: 0 success, 2 config error,
3 partial/incomplete archive, 4 scorer failure.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click

from . import campaign as camp
from . import repair as rep
from .archive import read_manifest
from .errors import ConfigError, DataIntegrityError, PipeshiftError, ScorerError, TrainingError
from .imaging import write_png16
from .scoring import gen_phantoms, margin, predict
from .search import success_rate
from .stages import FAMILIES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL = 3
EXIT_SCORER = 4


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_config(path, overrides: dict) -> camp.CampaignConfig:
    try:
        doc = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return camp.CampaignConfig.from_dict(doc)
    except (OSError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, f"cannot read config: {exc}")
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))


def _common_overrides(seed, tau, optimizer, budget, families, workers, out) -> dict:
    ov: dict = {}
    if seed is not None:
        ov["seed"] = seed
    if tau:
        ov["tau"] = [float(t) for t in tau]
    if optimizer:
        ov["optimizer"] = optimizer
    if budget is not None:
        ov["budget"] = budget
    if families:
        ov["families"] = [f.strip() for f in families.split(",") if f.strip()]
    if workers is not None:
        ov["workers"] = workers
    if out:
        ov["out"] = out
    return ov


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="JSON campaign config")(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--tau", multiple=True, type=float)(fn)
    fn = click.option("--optimizer", type=click.Choice(["random", "tpe"]), default=None)(fn)
    fn = click.option("--budget", type=int, default=None)(fn)
    fn = click.option("--families", type=str, default=None,
                      help="comma-separated subset of " + ",".join(FAMILIES))(fn)
    fn = click.option("--workers", type=int, default=None)(fn)
    fn = click.option("--out", type=click.Path(), default=None)(fn)
    return fn


@click.group()
def main():
    """Pipeline-shift attack synthesis, archiving, and token-space repair."""


@main.command("gen-phantoms")
@click.option("--n", type=int, default=200, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--modality", type=click.Choice(["mri-like", "xray-like", "ct-like"]),
              default="mri-like", show_default=True)
@click.option("--out", type=click.Path(), required=True)
def gen_phantoms_cmd(n, seed, modality, out):
    """Write a balanced phantom dataset (16-bit PNGs + labels.csv)."""
    try:
        samples = gen_phantoms(n, seed, modality)
    except PipeshiftError as exc:
        _fail(EXIT_CONFIG, str(exc))
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    width = len(str(n - 1))
    rows = []
    for i, s in enumerate(samples):
        sid = f"ph-{seed}-{i:0{width}d}"
        rel = f"{sid}.png"
        write_png16(root / rel, s.image)
        rows.append({"id": sid, "path": rel, "label": s.label})
    with open(root / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "path", "label"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    click.echo(f"wrote {len(rows)} phantoms under {root}")


@main.command("attack")
@common_options
def attack_cmd(config_path, seed, tau, optimizer, budget, families, workers, out):
    """Run a full attack campaign and archive the results."""
    config = _load_config(config_path, _common_overrides(seed, tau, optimizer, budget,
                                                         families, workers, out))
    try:
        root = camp.run_campaign(config)
    except ScorerError as exc:
        _fail(EXIT_SCORER, str(exc))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    pairs, _ = read_manifest(root)
    records = [r for r, _ in pairs]
    rate = success_rate(records)
    click.echo(f"archived {len(records)} records to {root}; "
               f"success rate {camp._fmt(rate)}%")


@main.command("eval-zeroshot")
@common_options
def eval_zeroshot_cmd(config_path, seed, tau, optimizer, budget, families, workers, out):
    """Clean zero-shot accuracy of the configured scorer on the dataset."""
    config = _load_config(config_path, _common_overrides(seed, tau, optimizer, budget,
                                                         families, workers, out))
    try:
        samples = camp.ingest_dataset(config)
        scorer = camp.build_scorer(config)
        protos = scorer.prototypes()
    except ScorerError as exc:
        _fail(EXIT_SCORER, str(exc))
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    correct = sum(
        predict(margin(scorer.embed_image(s.image), protos)) == s.label for s in samples
    )
    click.echo(f"clean accuracy: {100.0 * correct / len(samples):.2f}% "
               f"({correct}/{len(samples)})")


@main.command("ablate-stages")
@common_options
def ablate_stages_cmd(config_path, seed, tau, optimizer, budget, families, workers, out):
    """Single-stage vs chained campaigns; writes stage_ablation.csv."""
    config = _load_config(config_path, _common_overrides(seed, tau, optimizer, budget,
                                                         families, workers, out))
    base_out = Path(config.out)
    settings = {"only-A": ("A",), "only-R": ("R",), "only-D": ("D",), "full": FAMILIES}
    archives = {}
    try:
        for name, fams in settings.items():
            sub = camp.CampaignConfig(**{**config.__dict__,
                                         "families": fams,
                                         "out": str(base_out / name)})
            camp.run_campaign(sub)
            archives[name] = base_out / name
    except ScorerError as exc:
        _fail(EXIT_SCORER, str(exc))
    rows = camp.stage_ablation_rows(archives)
    camp._write_csv(base_out / "stage_ablation.csv", rows)
    for row in rows:
        click.echo(f"{row['setting']}: shifted accuracy {row['shifted_accuracy']}%")
    click.echo(f"wrote {base_out / 'stage_ablation.csv'}")


@main.command("ablate-budget")
@common_options
def ablate_budget_cmd(config_path, seed, tau, optimizer, budget, families, workers, out):
    """One traced campaign at the max budget; writes budget_curve.csv."""
    overrides = _common_overrides(seed, tau, optimizer, budget, families, workers, out)
    overrides["archive_traces"] = True
    config = _load_config(config_path, overrides)
    try:
        root = camp.run_campaign(config)
    except ScorerError as exc:
        _fail(EXIT_SCORER, str(exc))
    click.echo(f"wrote {Path(root) / 'budget_curve.csv'}")


@main.command("repair-train")
@click.option("--clean-seed", type=int, default=12345, show_default=True,
              help="phantom seed for the clean training set")
@click.option("--clean-n", type=int, default=200, show_default=True)
@click.option("--modality", default="mri-like", show_default=True)
@click.option("--student-seed", type=int, default=42, show_default=True)
@click.option("--teacher-seed", type=int, default=43, show_default=True)
@click.option("--scorer-seed", type=int, default=7, show_default=True,
              help="prototype-bank seed for the student scorer")
@click.option("--lambda-cons", type=float, default=0.1, show_default=True)
@click.option("--lambda-dist", type=float, default=1.0, show_default=True)
@click.option("--learning-rate", type=float, default=0.01, show_default=True)
@click.option("--epochs", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="adapter output file")
def repair_train_cmd(clean_seed, clean_n, modality, student_seed, teacher_seed,
                     scorer_seed, lambda_cons, lambda_dist, learning_rate, epochs,
                     seed, out):
    """Train the residual token adapter on clean phantoms."""
    cfg = rep.RepairConfig(lambda_cons=lambda_cons, lambda_dist=lambda_dist,
                           learning_rate=learning_rate, epochs=epochs)
    student = rep.student_encoder(student_seed, modality)
    scorer = rep.StudentScorer(student, scorer_seed, modality)
    teacher = rep.teacher_encoder(teacher_seed, modality) if lambda_dist > 0 else None
    problem = rep.RepairProblem(student=student, protos=scorer.prototypes(), cfg=cfg,
                                teacher=teacher)
    clean_set = gen_phantoms(clean_n, clean_seed, modality)
    try:
        w, trace = rep.train_adapter(clean_set, problem, seed=seed)
    except TrainingError as exc:
        _fail(EXIT_CONFIG, str(exc))
    echo = {
        "lambda_cons": lambda_cons, "lambda_dist": lambda_dist,
        "learning_rate": learning_rate, "epochs": epochs, "seed": seed,
        "student_seed": student_seed, "teacher_seed": teacher_seed,
        "scorer_seed": scorer_seed, "modality": modality,
        "clean_seed": clean_seed, "clean_n": clean_n,
        "final_loss": trace[-1] if trace else None,
    }
    rep.save_adapter(out, w, echo)
    click.echo(f"trained adapter: loss {trace[0]:.6f} -> {trace[-1]:.6f}; saved to {out}")


@main.command("repair-eval")
@click.option("--archive", "archive_root", type=click.Path(), required=True)
@click.option("--adapter", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None,
              help="CSV output path (default: <archive>/repair_report.csv)")
def repair_eval_cmd(archive_root, adapter, out):
    """Before/after accuracy of the adapted student on an archive."""
    import hashlib

    try:
        w, echo = rep.load_adapter(adapter)
    except (OSError, DataIntegrityError) as exc:
        _fail(EXIT_CONFIG, f"cannot load adapter: {exc}")
    student = rep.student_encoder(int(echo.get("student_seed", 42)),
                                  echo.get("modality", "mri-like"))
    scorer = rep.StudentScorer(student, int(echo.get("scorer_seed", 7)),
                               echo.get("modality", "mri-like"))
    root = Path(archive_root)
    pairs, _ = read_manifest(root)
    entries = []
    for rec, doc in pairs:
        entry = {
            "sample_id": rec.sample_id,
            "label": rec.label,
            "modality_tag": rec.modality_tag,
            "clean_path": root / doc["clean_png"],
            "adv_path": root / doc["adv_png"],
        }
        # Hash check on read: a tampered image demotes the entry to missing.
        for key, sha_key in (("clean_path", "clean_sha256"), ("adv_path", "adv_sha256")):
            path = entry[key]
            if path.exists():
                if hashlib.sha256(path.read_bytes()).hexdigest() != doc[sha_key]:
                    entry[key] = root / "images" / "__hash_mismatch__"
        entries.append(entry)
    out = out or str(root / "repair_report.csv")
    report = rep.eval_on_archive(entries, scorer, w)
    rows = [{
        "scope": "overall",
        "n": report.total,
        "clean_before": f"{100 * report.clean_acc_before:.10g}",
        "clean_after": f"{100 * report.clean_acc_after:.10g}",
        "adv_before": f"{100 * report.adv_acc_before:.10g}",
        "adv_after": f"{100 * report.adv_acc_after:.10g}",
    }]
    for tag, vals in report.per_tag.items():
        rows.append({
            "scope": tag or "(untagged)",
            "n": "",
            "clean_before": f"{100 * vals['clean_before']:.10g}",
            "clean_after": f"{100 * vals['clean_after']:.10g}",
            "adv_before": f"{100 * vals['adv_before']:.10g}",
            "adv_after": f"{100 * vals['adv_after']:.10g}",
        })
    if out:
        camp._write_csv(Path(out), rows)
    for row in rows:
        click.echo(
            f"{row['scope']}: clean {row['clean_before']}% -> {row['clean_after']}%, "
            f"adversarial {row['adv_before']}% -> {row['adv_after']}%"
        )
    if report.skipped:
        click.echo(f"skipped {len(report.skipped)} entries with missing images", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command("report")
@click.option("--archive", "archive_root", type=click.Path(), required=True)
def report_cmd(archive_root):
    """Regenerate summary CSVs and print the headline tables."""
    root = Path(archive_root)
    try:
        pairs, errors = read_manifest(root, strict=False)
    except DataIntegrityError as exc:
        _fail(EXIT_CONFIG, str(exc))
    for line_no, message in errors:
        click.echo(f"manifest line {line_no} skipped: {message}", err=True)
    if not pairs:
        click.echo("archive holds 0 records; nothing to report")
        camp.write_summaries(root)
        return
    paths = camp.write_summaries(root)
    records = [r for r, _ in pairs]
    optimizer = records[0].optimizer
    acc_rows, fam_rows = camp.summarize(records, optimizer)
    for row in acc_rows:
        click.echo(
            f"tau={row['tau']} {row['optimizer']}: clean {row['clean_accuracy']}% "
            f"shifted {row['shifted_accuracy']}% success {row['success_rate']}%"
        )
    for row in fam_rows:
        cells = "  ".join(f"{fam}={row[fam]}" for fam in FAMILIES)
        click.echo(f"tau={row['tau']} per-family success: {cells}")
    repair_csv = root / "repair_report.csv"
    if repair_csv.exists():
        click.echo("repair before/after (from repair-eval):")
        for line in repair_csv.read_text().splitlines():
            click.echo(f"  {line}")
    click.echo("wrote " + ", ".join(str(p) for p in paths))


@main.command("verify-archive")
@click.option("--archive", "archive_root", type=click.Path(), required=True)
def verify_archive_cmd(archive_root):
    """Re-validate hashes, SSIM constraints, and decoded-PNG objectives."""
    try:
        count, problems = camp.verify_archive(archive_root)
    except DataIntegrityError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if problems:
        for p in problems:
            click.echo(p, err=True)
        _fail(EXIT_PARTIAL, f"{len(problems)} problems in {count} records")
    click.echo(f"archive ok: {count} records verified")


if __name__ == "__main__":
    main()
