from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

from ..core import Clip, ClipRecord, filter_split, load_clip


class ManifestDataset:
    """Clips listed in a manifest, loaded lazily from ``root`` and kept in memory."""

    def __init__(self, records: Sequence[ClipRecord], root, split: Optional[str] = None):
        self.records: List[ClipRecord] = filter_split(records, split)
        self.root = Path(root)
        self.split = split
        self._cache = {}

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i) -> Clip:
        if i not in self._cache:
            self._cache[i] = load_clip(self.records[i], self.root)
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def categories_of(dataset) -> dict:
    """``clip_id -> category`` for a manifest dataset or a plain list of clips."""
    if isinstance(dataset, ManifestDataset):
        return {r.clip_id: r.category for r in dataset.records}
    return {c.clip_id: c.category for c in dataset}
