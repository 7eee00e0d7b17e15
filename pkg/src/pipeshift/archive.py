"""Attack archive persistence: JSON-lines manifest plus 16-bit PNG images.

Layout under an archive directory:

    manifest.jsonl      one schema-versioned record per (sample, tau)
    images/<id>_<tau>_clean.png
    images/<id>_<tau>_adv.png
    campaign.json       config echo + completion flag

Every manifest record carries relative image paths and SHA-256 hashes of
the PNG bytes; readers verify hashes before trusting an image. The decoded
PNG is re-scored at write time so the manifest holds both the in-memory
objective and the value a later reader will reproduce from disk.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import DataIntegrityError
from .imaging import decode_png, encode_png16
from .search import AttackRecord, FamilyOutcome

SCHEMA_VERSION = 1


def record_to_json(record: AttackRecord, clean_rel: str, adv_rel: str,
                   clean_sha: str, adv_sha: str, j_adv_png: float) -> dict:
    per_family = {
        fam: {
            "objective": o.objective,
            "params": o.params,
            "alpha_star": o.alpha_star,
            "ssim_global": o.ssim_global,
            "ssim_roi": o.ssim_roi,
            "status": o.status,
        }
        for fam, o in record.per_family.items()
    }
    doc = {
        "schema": SCHEMA_VERSION,
        "sample_id": record.sample_id,
        "label": record.label,
        "modality_tag": record.modality_tag,
        "tau": record.tau,
        "optimizer": record.optimizer,
        "seed": record.seed,
        "trials_per_family": record.trials_per_family,
        "j_clean": record.j_clean,
        "clean_correct": record.clean_correct,
        "winner_family": record.winner_family,
        "winner_params": record.winner_params,
        "alpha_star": record.alpha_star,
        "ssim_global": record.ssim_global,
        "ssim_roi": record.ssim_roi,
        "j_adv": record.j_adv,
        "j_adv_png": j_adv_png,
        "success": record.success,
        "per_family": per_family,
        "clean_png": clean_rel,
        "adv_png": adv_rel,
        "clean_sha256": clean_sha,
        "adv_sha256": adv_sha,
    }
    if record.traces is not None:
        doc["traces"] = record.traces
    return doc


def record_from_json(doc: dict) -> AttackRecord:
    per_family = {
        fam: FamilyOutcome(
            family=fam,
            objective=o["objective"],
            params=o["params"],
            alpha_star=o["alpha_star"],
            ssim_global=o["ssim_global"],
            ssim_roi=o["ssim_roi"],
            status=o["status"],
        )
        for fam, o in doc.get("per_family", {}).items()
    }
    return AttackRecord(
        sample_id=doc["sample_id"],
        label=int(doc["label"]),
        modality_tag=doc.get("modality_tag", ""),
        tau=float(doc["tau"]),
        optimizer=doc["optimizer"],
        seed=int(doc["seed"]),
        trials_per_family=int(doc["trials_per_family"]),
        j_clean=float(doc["j_clean"]),
        clean_correct=bool(doc["clean_correct"]),
        winner_family=doc["winner_family"],
        winner_params=doc["winner_params"],
        alpha_star=float(doc["alpha_star"]),
        ssim_global=float(doc["ssim_global"]),
        ssim_roi=float(doc["ssim_roi"]),
        j_adv=float(doc["j_adv"]),
        success=bool(doc["success"]),
        per_family=per_family,
        traces=doc.get("traces"),
    )


class ArchiveWriter:
    """Accumulates records + images and writes a deterministic manifest.

    Records are buffered and written sorted by (sample_id, tau) so worker
    scheduling never changes the output bytes.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "images").mkdir(parents=True, exist_ok=True)
        self._docs: list[dict] = []

    def add(self, record: AttackRecord, clean: np.ndarray, adv: np.ndarray,
            rescore) -> dict:
        """Persist one record; ``rescore`` maps a decoded image to J."""
        tag = f"{record.sample_id}_tau{record.tau:g}"
        clean_rel = f"images/{tag}_clean.png"
        adv_rel = f"images/{tag}_adv.png"
        clean_bytes = encode_png16(clean)
        adv_bytes = encode_png16(adv)
        (self.root / clean_rel).write_bytes(clean_bytes)
        (self.root / adv_rel).write_bytes(adv_bytes)
        j_adv_png = float(rescore(decode_png(adv_bytes)))
        doc = record_to_json(
            record, clean_rel, adv_rel,
            hashlib.sha256(clean_bytes).hexdigest(),
            hashlib.sha256(adv_bytes).hexdigest(),
            j_adv_png,
        )
        self._docs.append(doc)
        return doc

    def finalize(self, config_echo: dict, complete: bool = True) -> Path:
        self._docs.sort(key=lambda d: (d["sample_id"], d["tau"]))
        manifest = self.root / "manifest.jsonl"
        with open(manifest, "w", encoding="utf-8") as fh:
            for doc in self._docs:
                fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
        echo = dict(config_echo)
        echo["complete"] = bool(complete)
        echo["schema"] = SCHEMA_VERSION
        with open(self.root / "campaign.json", "w", encoding="utf-8") as fh:
            json.dump(echo, fh, sort_keys=True, indent=2)
            fh.write("\n")
        return manifest


def read_manifest(root: str | os.PathLike, strict: bool = True):
    """Yield (record, doc) pairs; corrupt lines raise or are reported.

    Returns (records, errors) where errors is a list of (line_no, message).
    """
    root = Path(root)
    records, errors = [], []
    path = root / "manifest.jsonl"
    if not path.exists():
        raise DataIntegrityError(f"no manifest at {path}")
    with open(path, "rb") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                if doc.get("schema") != SCHEMA_VERSION:
                    raise ValueError(f"unsupported schema {doc.get('schema')!r}")
                records.append((record_from_json(doc), doc))
            except Exception as exc:
                if strict:
                    raise DataIntegrityError(f"manifest line {line_no}: {exc}") from exc
                errors.append((line_no, str(exc)))
    return records, errors


def verify_images(root: str | os.PathLike, docs: list[dict]) -> list[str]:
    """Check that every referenced PNG exists and matches its hash."""
    root = Path(root)
    problems = []
    for doc in docs:
        for key, sha_key in (("clean_png", "clean_sha256"), ("adv_png", "adv_sha256")):
            rel = doc[key]
            path = root / rel
            if not path.exists():
                problems.append(f"{doc['sample_id']}: missing {rel}")
                continue
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != doc[sha_key]:
                problems.append(f"{doc['sample_id']}: hash mismatch for {rel}")
    return problems
