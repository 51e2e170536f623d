"""Per-(country, label) balancing: planning and materialisation of synthetic images."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from ..data_model import DatasetManifest, PatientRecord
from ..errors import PartialPlanError, PlanError
from .augment import AugmentationPolicy, apply_augmentation
from .images import DEFAULT_SIZE, decode_and_preprocess, save_image

log = logging.getLogger(__name__)

Cell = tuple[str, str]  # (country, label)


@dataclass(frozen=True)
class CellPlan:
    existing: int
    target: int

    @property
    def synth_needed(self) -> int:
        return max(0, self.target - self.existing)

    @property
    def drop_needed(self) -> int:
        return max(0, self.existing - self.target)


@dataclass(frozen=True)
class BalancingPlan:
    cells: dict[Cell, CellPlan]

    @property
    def total_synth(self) -> int:
        return sum(c.synth_needed for c in self.cells.values())

    def targets_by_label(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for (_, label), cell in self.cells.items():
            totals[label] = totals.get(label, 0) + cell.target
        return totals

    def summary(self) -> str:
        lines = [
            f"{country},{label}: existing={c.existing} target={c.target} "
            f"synth={c.synth_needed} drop={c.drop_needed}"
            for (country, label), c in sorted(self.cells.items())
        ]
        totals = self.targets_by_label()
        lines.append("totals: " + " ".join(f"{k}={v}" for k, v in sorted(totals.items())))
        return "\n".join(lines)


def plan_balancing(
    counts: Mapping[Cell, int],
    targets: Mapping[str, int],
    allow_downsample: bool = False,
) -> BalancingPlan:
    """Plan how many images each (country, label) cell needs to reach its target.

    Only labels listed in ``targets`` are planned. Every country seen in
    ``counts`` receives a cell for each targeted label, so a country with no
    images of a label cannot be balanced (there is no source to augment) and
    is rejected.
    """
    countries = sorted({country for country, _ in counts})
    cells: dict[Cell, CellPlan] = {}
    for label, target in sorted(targets.items()):
        if target < 0:
            raise PlanError(f"negative target {target} for label {label!r}")
        for country in countries:
            existing = counts.get((country, label), 0)
            if existing > target and not allow_downsample:
                raise PlanError(
                    f"cell ({country}, {label}) already has {existing} > target {target}; "
                    "enable downsampling to reduce it"
                )
            if existing == 0 and target > 0:
                raise PlanError(f"cell ({country}, {label}) has no source images to augment")
            cells[(country, label)] = CellPlan(existing, target)
    return BalancingPlan(cells)


def _stem(image_ref: str) -> str:
    return Path(image_ref).stem


def execute_plan(
    manifest: DatasetManifest,
    plan: BalancingPlan,
    policy: AugmentationPolicy,
    staging_dir: str | Path,
    target_size: tuple[int, int] = DEFAULT_SIZE,
    loader: Callable[[str, tuple[int, int]], np.ndarray] = decode_and_preprocess,
) -> DatasetManifest:
    """Materialise a balancing plan.

    Source records of each under-filled cell are cycled in manifest order;
    the k-th synthetic image of a cell is drawn with augmentation index k from
    its source and written to ``augmented/<country>/<label>/<stem>_<k>.png``
    under ``staging_dir``. Over-full cells (downsampling) keep a seeded
    uniform subset.
    """
    staging = Path(staging_dir)
    by_cell: dict[Cell, list[int]] = {}
    for i, r in enumerate(manifest):
        by_cell.setdefault((r.country, r.label), []).append(i)

    drop: set[int] = set()
    added: list[PatientRecord] = []
    completed: list[Cell] = []
    for cell, cp in sorted(plan.cells.items()):
        idx = by_cell.get(cell, [])
        if len(idx) != cp.existing:
            raise PlanError(
                f"plan expects {cp.existing} records in {cell}, manifest has {len(idx)}"
            )
        if cp.drop_needed:
            rng = np.random.default_rng([policy.seed, len(completed), cp.existing])
            keep = set(rng.choice(len(idx), size=cp.target, replace=False).tolist())
            drop.update(j for k, j in enumerate(idx) if k not in keep)
        try:
            for k in range(cp.synth_needed):
                src_index = idx[k % len(idx)]
                src = manifest.records[src_index]
                image = loader(src.image_ref, target_size)
                out = apply_augmentation(image, policy, draw=k, image_index=src_index)
                path = staging / "augmented" / cell[0] / cell[1] / f"{_stem(src.image_ref)}_{k}.png"
                save_image(out, path)
                added.append(replace(src, image_ref=str(path)))
        except OSError as exc:
            raise PartialPlanError(completed, exc) from exc
        completed.append(cell)
        if cp.synth_needed or cp.drop_needed:
            log.info("balanced %s: +%d -%d", cell, cp.synth_needed, cp.drop_needed)

    if not added and not drop:
        return manifest
    kept = tuple(r for i, r in enumerate(manifest) if i not in drop)
    return DatasetManifest(kept + tuple(added))
