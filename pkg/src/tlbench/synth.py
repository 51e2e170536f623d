"""Desk-scale synthetic corpus: bright elliptical "opacity" on noise vs. noise only.

Positive images (label ``covid``) contain one soft-edged bright ellipse; the
ellipse geometry is written to ``geometry.csv`` so localisation can be
checked against it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data_model import DatasetManifest, PatientRecord, write_manifest

DEFAULT_COUNTRIES = {
    "China": 0.2,
    "France": 0.15,
    "Iran": 0.1,
    "Russia": 0.15,
    "Spain": 0.2,
    "USA": 0.2,
}


@dataclass(frozen=True)
class SynthConfig:
    n: int = 2000
    image_size: int = 64
    positive_fraction: float = 0.55
    countries: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COUNTRIES))
    age_mean: float = 48.0
    age_std: float = 18.0
    missing_age: float = 0.1
    missing_sex: float = 0.1
    female_fraction: float = 0.6
    noise_level: float = 0.1
    seed: int = 7


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float  # radians

    def radius(self, size: int) -> np.ndarray:
        """Normalised elliptical radius of every pixel (1 on the boundary)."""
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = (xx - self.cx) * c + (yy - self.cy) * s
        v = -(xx - self.cx) * s + (yy - self.cy) * c
        return np.sqrt((u / self.rx) ** 2 + (v / self.ry) ** 2)

    def mask(self, size: int) -> np.ndarray:
        return self.radius(size) <= 1.0


def class_counts(n: int, positive_fraction: float) -> tuple[int, int]:
    """(positives, negatives) with positives = floor(n * fraction)."""
    pos = math.floor(n * positive_fraction + 1e-9)
    return pos, n - pos


def _render(rng: np.random.Generator, size: int, noise: float, ellipse: Ellipse | None):
    img = 0.35 + noise * rng.standard_normal((size, size))
    if ellipse is not None:
        r = ellipse.radius(size)
        # soft edge over the outer 15% of the radius
        img += 0.4 * np.clip((1.0 - r) / 0.15, 0.0, 1.0)
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def _ellipse(rng: np.random.Generator, size: int) -> Ellipse:
    rx, ry = rng.uniform(0.12, 0.22, size=2) * size
    margin = max(rx, ry) + 2
    cx, cy = rng.uniform(margin, size - 1 - margin, size=2)
    return Ellipse(float(cx), float(cy), float(rx), float(ry), float(rng.uniform(0, math.pi)))


def generate_corpus(out_dir: str | Path, config: SynthConfig = SynthConfig()) -> DatasetManifest:
    """Write images, ``manifest.csv`` and ``geometry.csv`` under ``out_dir``."""
    out = Path(out_dir).resolve()
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    n_pos, _ = class_counts(config.n, config.positive_fraction)
    labels = np.zeros(config.n, dtype=bool)
    labels[:n_pos] = True
    labels = rng.permutation(labels)

    names = sorted(config.countries)
    weights = np.array([config.countries[c] for c in names], dtype=np.float64)
    weights /= weights.sum()

    records, geometry = [], []
    for i, positive in enumerate(labels):
        ellipse = _ellipse(rng, config.image_size) if positive else None
        pixels = _render(rng, config.image_size, config.noise_level, ellipse)
        path = out / "images" / f"img_{i:05d}.png"
        Image.fromarray(pixels, mode="L").save(path)

        country = names[int(rng.choice(len(names), p=weights))]
        age = float(np.clip(round(rng.normal(config.age_mean, config.age_std)), 0, 100))
        sex = "female" if rng.random() < config.female_fraction else "male"
        if rng.random() < config.missing_age:
            age = None
        if rng.random() < config.missing_sex:
            sex = None
        modality = "ct" if rng.random() < 0.5 else "xray"
        records.append(
            PatientRecord(
                image_ref=str(path),
                label="covid" if positive else "normal",
                country=country,
                age=age,
                sex=sex,
                modality=modality,
                source=f"synthetic-{country.lower()}",
            )
        )
        if ellipse is not None:
            geometry.append((str(path), ellipse))

    manifest = DatasetManifest(tuple(records))
    write_manifest(manifest, out / "manifest.csv", relative_to=out)
    with (out / "geometry.csv").open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image_ref", "cx", "cy", "rx", "ry", "angle"])
        for ref, e in geometry:
            writer.writerow([Path(ref).relative_to(out).as_posix(),
                             *(repr(v) for v in (e.cx, e.cy, e.rx, e.ry, e.angle))])
    return manifest


def load_geometry(path: str | Path) -> dict[str, Ellipse]:
    """Ellipses keyed by absolute image path."""
    path = Path(path).resolve()
    with path.open() as fh:
        return {
            str(path.parent / row["image_ref"]): Ellipse(
                *(float(row[k]) for k in ("cx", "cy", "rx", "ry", "angle")))
            for row in csv.DictReader(fh)
        }
