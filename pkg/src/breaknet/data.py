"""On-disk datasets and PGM previews.

A dataset directory holds one sub-directory per volume::

    vol_000/
        meta.json
        frame_000_image.bnt
        frame_000_labels.bnt
        frame_000_boundaries.bnt
        frame_000_labels_lq.bnt     (only with degraded ground truth)
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensorio
from .synth import NUM_CLASSES, BScanSample, DegradedTruth, SynthSpec, Volume


def rle_encode(mask: np.ndarray) -> list[list[int]]:
    """[start, length] runs of True."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.concatenate(([False], mask, [False]))
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [[int(a), int(b - a)] for a, b in zip(edges[::2], edges[1::2])]


def rle_decode(runs, length: int) -> np.ndarray:
    mask = np.zeros(length, dtype=bool)
    for start, n in runs:
        mask[start:start + n] = True
    return mask


def write_volume(directory, volume: Volume, seed: int,
                 degraded: Optional[DegradedTruth] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames_meta = []
    for i, fr in enumerate(volume.frames):
        stem = f"frame_{i:03d}"
        tensorio.save(d / f"{stem}_image.bnt", fr.image.astype(np.float32))
        tensorio.save(d / f"{stem}_labels.bnt", fr.labels.astype(np.float32))
        tensorio.save(d / f"{stem}_boundaries.bnt", fr.boundaries.astype(np.float64))
        entry = {
            "index": i,
            "image": f"{stem}_image.bnt",
            "labels": f"{stem}_labels.bnt",
            "boundaries": f"{stem}_boundaries.bnt",
            "shadow_rle": rle_encode(fr.shadow_columns),
            "shadow_start": [int(v) for v in fr.shadow_start[fr.shadow_columns]],
        }
        if degraded is not None:
            tensorio.save(d / f"{stem}_labels_lq.bnt", degraded.labels[i].astype(np.float32))
            entry["labels_lq"] = f"{stem}_labels_lq.bnt"
            entry["keyframe"] = i in degraded.keyframes
        frames_meta.append(entry)
    meta = {
        "spec": volume.spec.to_dict(),
        "seed": int(seed),
        "axial_pitch": volume.spec.axial_pitch,
        "lateral_pitch": volume.spec.lateral_pitch,
        "num_classes": NUM_CLASSES,
        "frames": frames_meta,
    }
    if degraded is not None:
        meta["keyframes"] = list(degraded.keyframes)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return d


def volume_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    vols = sorted(p for p in root.iterdir() if (p / "meta.json").is_file())
    if not vols:
        raise FileNotFoundError(f"no volumes (meta.json) found under {root}")
    return vols


def load_dataset(root, label_set: str = "true") -> list[BScanSample]:
    """All frames under ``root``; ``label_set`` picks "true" or "lq" labels."""
    if label_set not in ("true", "lq"):
        raise ValueError("label_set must be 'true' or 'lq'")
    samples = []
    for vol in volume_dirs(root):
        meta = json.loads((vol / "meta.json").read_text())
        w = meta["spec"]["width"]
        for fr in meta["frames"]:
            key = "labels" if label_set == "true" else "labels_lq"
            if key not in fr:
                raise FileNotFoundError(f"{vol}: frame {fr['index']} has no {key} (run synth --degrade)")
            mask = rle_decode(fr["shadow_rle"], w)
            start = np.full(w, -1, dtype=np.int64)
            start[mask] = fr["shadow_start"]
            samples.append(BScanSample(
                image=tensorio.load(vol / fr["image"]).astype(np.float32),
                labels=tensorio.load(vol / fr[key]).astype(np.int64),
                boundaries=tensorio.load(vol / fr["boundaries"]),
                axial_pitch=float(meta["axial_pitch"]),
                lateral_pitch=float(meta["lateral_pitch"]),
                shadow_columns=mask,
                shadow_start=start,
            ))
    return samples


def dataset_num_classes(root) -> int:
    values = {json.loads((v / "meta.json").read_text()).get("num_classes", NUM_CLASSES) for v in volume_dirs(root)}
    if len(values) != 1:
        raise ValueError(f"volumes under {root} disagree on num_classes: {sorted(values)}")
    return values.pop()


def dataset_hash(root) -> str:
    """SHA-256 over every file under ``root`` (relative path + bytes)."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def write_pgm(path, image: np.ndarray, overlays: Sequence[np.ndarray] = (), values: Sequence[int] = ()) -> None:
    """8-bit binary PGM; each overlay (8 x W boundary rows) is drawn with its grey value."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pix = np.round(img * 255).astype(np.uint8)
    h, w = pix.shape
    for rows, value in zip(overlays, values or [255] * len(overlays)):
        rows = np.asarray(rows)
        for b in rows:
            ok = np.isfinite(b)
            r = np.clip(np.floor(b[ok] + 0.5).astype(int), 0, h - 1)
            pix[r, np.flatnonzero(ok)] = value
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
