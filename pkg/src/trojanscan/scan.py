"""Run trigger recovery over every model of a zoo and collect feature bags."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .detector import class_trigger_sizes
from .features import FeatureBag, build_bag
from .filters import recover_filters
from .model import load_model
from .triggers import RecoveryConfig, TriggerCandidate, recover_all
from .zoo import _map, load_zoo, probe_images

log = logging.getLogger(__name__)


@dataclass
class ModelScan:
    model_id: str
    bag: FeatureBag
    trigger_sizes: np.ndarray  # [K] smallest flipping mask mass per label
    candidates: list[TriggerCandidate]
    first_flips: list[Optional[int]]


def probe_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 7]).generate_state(1)[0])


def scan_model(path, config: RecoveryConfig, index: int = 0, model_id: Optional[str] = None,
               keep_candidates: bool = False) -> ModelScan:
    """Recover ``n_rounds`` candidates per class image and build the model's bag."""
    model = load_model(path)
    K = model.num_classes
    images = probe_images(model, K, probe_seed(config.seed, index))
    cfg = replace(config, seed=int(np.random.SeedSequence([config.seed, index]).generate_state(1)[0]))
    cands = recover_all(model, images, cfg)
    filters = []
    if config.filter_enabled:
        for i, x in enumerate(images):
            filters += recover_filters(model, x, cfg, image_index=i)
    mid = model_id or Path(path).stem
    bag = build_bag(mid, cands, filters, K, config.n_rounds, config.filter_rounds)
    return ModelScan(
        model_id=mid,
        bag=bag,
        trigger_sizes=class_trigger_sizes(cands, K),
        candidates=cands if keep_candidates else [],
        first_flips=[c.first_flip for c in cands],
    )


def _scan_task(args):
    path, config, index, mid = args
    return scan_model(path, config, index, mid)


def scan_zoo(zoo_dir, config: RecoveryConfig, workers: int = 1) -> tuple[list[ModelScan], np.ndarray]:
    """Scan every model listed in the zoo manifest; returns scans and 0/1 labels."""
    zoo_dir = Path(zoo_dir)
    _, manifest = load_zoo(zoo_dir)
    tasks = [(zoo_dir / e.path, config, i, Path(e.path).stem) for i, e in enumerate(manifest.entries)]
    scans = _map(_scan_task, tasks, workers)
    return scans, manifest.labels
