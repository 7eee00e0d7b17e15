"""Campaign orchestration: dataset ingestion, attack runs over a sample set,
summary statistics, and report emission.

A campaign config is a JSON document (UTF-8). Minimal phantom example:

    {
      "dataset": {"source": "phantoms", "n": 200, "seed": 7,
                  "modality": "mri-like"},
      "scorer": {"backend": "synthetic", "seed": 11},
      "tau": [0.8],
      "optimizer": "tpe",
      "budget": 50,
      "families": ["A", "R", "D", "AR", "RD", "AD", "ARD"],
      "workers": 1,
      "seed": 123,
      "out": "runs/demo"
    }

All per-sample randomness derives from (campaign seed, sample id), so the
worker count never changes any output byte. Summary CSVs are recomputable
from the manifest alone; ``report`` regenerates them bit-identically.
"""

from __future__ import annotations

import csv
import io
import json
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import ArchiveWriter, read_manifest, verify_images
from .errors import ConfigError, DataIntegrityError, ScorerError
from .imaging import read_png
from .scoring import SyntheticScorer, gen_phantoms, margin, signed_correctness
from .search import AttackRecord, attack_sample, success_rate
from .seeding import derive_seed
from .stages import FAMILIES

UNDEFINED_CELL = "--"


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    label: int
    modality_tag: str = ""


@dataclass
class CampaignConfig:
    dataset: dict
    scorer: dict
    tau: list[float]
    optimizer: str = "tpe"
    budget: int = 50
    families: tuple[str, ...] = FAMILIES
    workers: int = 1
    seed: int = 0
    out: str = "runs/campaign"
    domains: dict = field(default_factory=dict)
    archive_traces: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "CampaignConfig":
        known = {
            "dataset", "scorer", "tau", "optimizer", "budget", "families",
            "workers", "seed", "out", "domains", "archive_traces",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "scorer"):
            if key not in doc:
                raise ConfigError(f"config missing {key!r}")
        taus = doc.get("tau", [0.9, 0.8])
        if not isinstance(taus, list):
            taus = [taus]
        if not taus or any(not (0.0 < t <= 1.0) for t in taus):
            raise ConfigError(f"tau values must lie in (0, 1]: {taus}")
        families = tuple(doc.get("families", FAMILIES))
        if not families or any(f not in FAMILIES for f in families):
            raise ConfigError(f"invalid family subset {families}")
        budget = int(doc.get("budget", 50))
        if budget < 1:
            raise ConfigError("budget must be >= 1")
        optimizer = doc.get("optimizer", "tpe")
        if optimizer not in ("random", "tpe"):
            raise ConfigError(f"unknown optimizer {optimizer!r}")
        return cls(
            dataset=doc["dataset"],
            scorer=doc["scorer"],
            tau=[float(t) for t in taus],
            optimizer=optimizer,
            budget=budget,
            families=families,
            workers=int(doc.get("workers", 1)),
            seed=int(doc.get("seed", 0)),
            out=str(doc.get("out", "runs/campaign")),
            domains=dict(doc.get("domains", {})),
            archive_traces=bool(doc.get("archive_traces", False)),
        )

    def echo(self) -> dict:
        return {
            "dataset": self.dataset,
            "scorer": self.scorer,
            "tau": self.tau,
            "optimizer": self.optimizer,
            "budget": self.budget,
            "families": list(self.families),
            "workers": self.workers,
            "seed": self.seed,
            "out": self.out,
            "domains": self.domains,
            "archive_traces": self.archive_traces,
            "success_rate_denominator": "clean-correct samples only",
        }


def load_config(path) -> CampaignConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return CampaignConfig.from_dict(doc)


# --- dataset ingestion ---------------------------------------------------------


def ingest_dataset(config: CampaignConfig) -> list[Sample]:
    """Materialize the campaign samples with stable, sorted ids."""
    ds = config.dataset
    source = ds.get("source")
    if source == "phantoms":
        n = int(ds.get("n", 200))
        seed = int(ds.get("seed", 0))
        tag = ds.get("modality", "mri-like")
        phantoms = gen_phantoms(n, seed, tag)
        width = len(str(n - 1))
        return [
            Sample(f"ph-{seed}-{i:0{width}d}", p.image, p.label, p.modality_tag)
            for i, p in enumerate(phantoms)
        ]
    if source == "directory":
        root = Path(ds["path"])
        labels_file = Path(ds.get("labels", root / "labels.csv"))
        errors = []
        samples = []
        try:
            rows = list(csv.DictReader(open(labels_file, encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read labels file {labels_file}: {exc}") from exc
        for row in rows:
            sid, rel, label = row.get("id"), row.get("path"), row.get("label")
            if label not in ("0", "1"):
                errors.append(f"{sid}: label must be 0 or 1, got {label!r}")
                continue
            try:
                image = read_png(root / rel)
            except (OSError, DataIntegrityError) as exc:
                errors.append(f"{sid}: {exc}")
                continue
            samples.append(Sample(sid, image, int(label), ds.get("modality", "")))
        if errors:
            raise ConfigError("dataset errors:\n" + "\n".join(errors))
        return sorted(samples, key=lambda s: s.sample_id)
    raise ConfigError(f"unknown dataset source {source!r}")


def build_scorer(config: CampaignConfig):
    sc = config.scorer
    backend = sc.get("backend")
    if backend == "synthetic":
        return SyntheticScorer(
            seed=int(sc.get("seed", 0)),
            dim=int(sc.get("dim", 64)),
            modality_tag=sc.get("modality", config.dataset.get("modality", "mri-like")),
        )
    if backend == "student":
        from .repair import StudentScorer, student_encoder

        encoder = student_encoder(int(sc.get("encoder_seed", 42)))
        return StudentScorer(
            encoder, int(sc.get("seed", 7)),
            sc.get("modality", config.dataset.get("modality", "mri-like")),
        )
    if backend == "external":
        from .wire import ExternalScorer

        kwargs = {
            "prototype_seed": sc.get("prototype_seed"),
            "modality_tag": sc.get("modality", config.dataset.get("modality", "mri-like")),
        }
        if "prototype_texts" in sc:
            texts = sc["prototype_texts"]
            kwargs["prototype_texts"] = (list(texts["negative"]), list(texts["positive"]))
        if sc.get("mode") == "tcp":
            return ExternalScorer.over_tcp(sc["host"], int(sc["port"]), **kwargs)
        if sc.get("mode") == "stdio":
            return ExternalScorer.over_stdio(list(sc["command"]), **kwargs)
        raise ConfigError("external scorer needs mode tcp or stdio")
    raise ConfigError(f"unknown scorer backend {backend!r}")


# --- campaign execution ---------------------------------------------------------

_WORKER_STATE: dict = {}


def _worker_init(config: CampaignConfig):
    scorer = build_scorer(config)
    _WORKER_STATE["scorer"] = scorer
    _WORKER_STATE["protos"] = scorer.prototypes()
    _WORKER_STATE["config"] = config


def _attack_one(args):
    sample, tau = args
    config: CampaignConfig = _WORKER_STATE["config"]
    record, adv = attack_sample(
        sample.image,
        sample.label,
        sample.sample_id,
        tau=tau,
        optimizer=config.optimizer,
        budget=config.budget,
        seed=derive_seed(config.seed, "sample", sample.sample_id, f"tau={tau:g}"),
        scorer=_WORKER_STATE["scorer"],
        protos=_WORKER_STATE["protos"],
        families=config.families,
        domain_overrides=config.domains or None,
        modality_tag=sample.modality_tag,
        keep_traces=config.archive_traces,
    )
    return record, adv, sample.image


def run_campaign(config: CampaignConfig) -> Path:
    """Attack every sample at every tau; write archive + summary CSVs.

    Returns the archive root. A scorer failure aborts the run but still
    flushes the partial manifest flagged incomplete.
    """
    samples = ingest_dataset(config)
    writer = ArchiveWriter(config.out)
    jobs = [(s, t) for t in config.tau for s in samples]
    complete = True
    results = []
    try:
        if config.workers > 1:
            with multiprocessing.Pool(
                config.workers, initializer=_worker_init, initargs=(config,)
            ) as pool:
                for res in pool.imap(_attack_one, jobs):
                    results.append(res)
            _worker_init(config)  # parent needs a scorer for PNG rescoring
        else:
            _worker_init(config)
            for job in jobs:
                results.append(_attack_one(job))
    except ScorerError:
        complete = False

    scorer = _WORKER_STATE.get("scorer") or build_scorer(config)
    protos = _WORKER_STATE.get("protos") or scorer.prototypes()
    for record, adv, clean in results:
        writer.add(
            record, clean, adv,
            rescore=lambda img, r=record: signed_correctness(
                margin(scorer.embed_image(img), protos), r.label
            ),
        )
    writer.finalize(config.echo(), complete=complete)
    write_summaries(config.out)
    if not complete:
        raise ScorerError("campaign incomplete: scorer failed; partial archive flagged")
    return Path(config.out)


# --- summaries -------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return UNDEFINED_CELL
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def _accuracy(records: list[AttackRecord], shifted: bool) -> float | None:
    if not records:
        return None
    correct = 0
    for r in records:
        j = r.j_adv if shifted else r.j_clean
        # J > 0 means correct; J == 0 ties break to class 0.
        correct += (j > 0) or (j == 0 and r.label == 0)
    return 100.0 * correct / len(records)


def summarize(records: list[AttackRecord], optimizer: str) -> tuple[list[dict], list[dict]]:
    """(accuracy rows, per-family success rows) grouped by tau."""
    taus = sorted({r.tau for r in records}, reverse=True)
    acc_rows, fam_rows = [], []
    for tau in taus:
        group = [r for r in records if r.tau == tau]
        acc_rows.append(
            {
                "tau": _fmt(tau),
                "optimizer": optimizer,
                "n": len(group),
                "clean_accuracy": _fmt(_accuracy(group, shifted=False)),
                "shifted_accuracy": _fmt(_accuracy(group, shifted=True)),
                "success_rate": _fmt(success_rate(group)),
            }
        )
        row = {"tau": _fmt(tau), "optimizer": optimizer}
        for fam in FAMILIES:
            row[fam] = _fmt(success_rate(group, fam))
        fam_rows.append(row)
    return acc_rows, fam_rows


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("", encoding="utf-8")
        return
    buf = io.StringIO()
    fields = list(rows[0].keys())
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_summaries(root) -> list[Path]:
    """Recompute all summary CSVs from the manifest (single source of truth).

    Corrupt manifest lines are skipped here; ``report`` surfaces them.
    """
    root = Path(root)
    pairs, _ = read_manifest(root, strict=False)
    records = [r for r, _ in pairs]
    optimizer = records[0].optimizer if records else ""
    acc_rows, fam_rows = summarize(records, optimizer)
    paths = []
    for name, rows in (("summary.csv", acc_rows), ("family_success.csv", fam_rows)):
        path = root / name
        _write_csv(path, rows)
        paths.append(path)
    curve = budget_curve(records)
    if curve:
        path = root / "budget_curve.csv"
        _write_csv(path, curve)
        paths.append(path)
    return paths


def budget_curve(records: list[AttackRecord]) -> list[dict]:
    """Success rate at nested trial budgets, from archived traces."""
    traced = [r for r in records if r.traces]
    if not traced:
        return []
    budget = min(len(t) for r in traced for t in r.traces.values())
    checkpoints = sorted({b for b in (10, 25, 50, 100, budget) if b <= budget})
    rows = []
    for tau in sorted({r.tau for r in traced}, reverse=True):
        group = [r for r in traced if r.tau == tau]
        eligible = [r for r in group if r.clean_correct]
        for b in checkpoints:
            if not eligible:
                rows.append({"tau": _fmt(tau), "budget": b, "success_rate": UNDEFINED_CELL})
                continue
            flips = 0
            for r in eligible:
                best = min(min(t[:b]) for t in r.traces.values())
                flips += best < 0
            rows.append(
                {
                    "tau": _fmt(tau),
                    "budget": b,
                    "success_rate": _fmt(100.0 * flips / len(eligible)),
                }
            )
    return rows


def stage_ablation_rows(archives: dict[str, str | Path]) -> list[dict]:
    """Accuracy table across family-restricted archives.

    ``archives`` maps a setting name (e.g. "only-A", "full") to an archive
    root; each must hold a single-tau campaign.
    """
    rows = []
    for name, root in archives.items():
        pairs, _ = read_manifest(root)
        records = [r for r, _ in pairs]
        rows.append(
            {
                "setting": name,
                "n": len(records),
                "clean_accuracy": _fmt(_accuracy(records, shifted=False)),
                "shifted_accuracy": _fmt(_accuracy(records, shifted=True)),
            }
        )
    return rows


def verify_archive(root) -> tuple[int, list[str]]:
    """Integrity check: hashes, constraint re-validation, and J agreement.

    Returns (record count, list of problems).
    """
    from .imaging import roi_mask
    from .similarity import ssim_global, ssim_roi

    root = Path(root)
    pairs, line_errors = read_manifest(root, strict=False)
    problems = [f"manifest line {n}: {m}" for n, m in line_errors]
    problems += verify_images(root, [doc for _, doc in pairs])
    for record, doc in pairs:
        try:
            clean = read_png(root / doc["clean_png"])
            adv = read_png(root / doc["adv_png"])
        except (OSError, DataIntegrityError):
            continue  # already reported by verify_images
        if record.alpha_star > 0.0 and record.j_adv < record.j_clean:
            sg = ssim_global(clean, adv)
            sr = ssim_roi(clean, adv, roi_mask(clean))
            # 16-bit PNG quantization moves SSIM a hair; allow that width.
            if sg < record.tau - 1e-4 or sr < record.tau - 1e-4:
                problems.append(
                    f"{record.sample_id}: archived image violates tau={record.tau} "
                    f"(global {sg:.6f}, roi {sr:.6f})"
                )
        if abs(doc["j_adv_png"] - record.j_adv) > 2e-3:
            problems.append(
                f"{record.sample_id}: decoded-PNG J {doc['j_adv_png']:.6f} "
                f"deviates from recorded {record.j_adv:.6f}"
            )
    return len(pairs), problems
