"""On-disk feature cache: one directory per feature config, one file per event."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .audio import Manifest, load_recording, preprocess
from .features import FeatureConfig, FeatureMatrix, extract_features, load_feature_matrix, save_feature_matrix

log = logging.getLogger(__name__)

INDEX_NAME = "index.json"


def _file_name(event_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9._-]", "_", event_id)[:80]
    digest = hashlib.sha1(event_id.encode("utf-8")).hexdigest()[:8]
    return f"{safe}-{digest}.cpfm"


def _write_atomic(path: Path, writer) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    writer(tmp)
    os.replace(tmp, path)


@dataclass
class ExtractSummary:
    config: FeatureConfig
    directory: Path
    written: int = 0
    skipped: int = 0
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _extract_one(args):
    manifest, entry, cfg, target = args
    try:
        fm = extract_features(preprocess(load_recording(manifest, entry), cfg.sample_rate_hz), cfg)
        _write_atomic(target, lambda p: save_feature_matrix(fm, p))
        return entry.event_id, None
    except Exception as exc:  # reported per event; the run carries on
        return entry.event_id, f"{type(exc).__name__}: {exc}"


class FeatureCache:
    def __init__(self, root):
        self.root = Path(root)

    def directory(self, cfg: FeatureConfig) -> Path:
        return self.root / cfg.key()

    def index(self, cfg: FeatureConfig) -> dict:
        path = self.directory(cfg) / INDEX_NAME
        if not path.exists():
            return {"config": cfg.to_dict(), "events": {}}
        return json.loads(path.read_text())

    def extract(self, manifest: Manifest, cfg: FeatureConfig, workers: int = 1) -> ExtractSummary:
        """Extract every manifest event not already cached for ``cfg``."""
        folder = self.directory(cfg)
        folder.mkdir(parents=True, exist_ok=True)
        summary = ExtractSummary(cfg, folder)
        todo = []
        for entry in manifest:
            target = folder / _file_name(entry.event_id)
            if target.exists():
                summary.skipped += 1
            else:
                todo.append((manifest, entry, cfg, target))
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_extract_one, todo, chunksize=8))
        else:
            results = [_extract_one(t) for t in todo]
        for event_id, error in results:
            if error is None:
                summary.written += 1
            else:
                summary.failures.append((event_id, error))
                log.warning("%s: %s", event_id, error)
        events = {}
        for entry in manifest:
            name = _file_name(entry.event_id)
            if (folder / name).exists():
                events[entry.event_id] = name
        index = {"config": cfg.to_dict(), "events": dict(sorted(events.items()))}
        _write_atomic(folder / INDEX_NAME,
                      lambda p: p.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n"))
        return summary

    def load(self, manifest: Manifest, cfg: FeatureConfig) -> list[FeatureMatrix]:
        folder = self.directory(cfg)
        out = []
        for entry in manifest:
            path = folder / _file_name(entry.event_id)
            if not path.exists():
                raise FileNotFoundError(f"{entry.event_id}: not cached under {folder}")
            out.append(load_feature_matrix(path))
        return out


class CachedFeatures:
    """Feature source for nested CV: extracts on first use, then reads the cache."""

    def __init__(self, manifest: Manifest, cache: FeatureCache, workers: int = 1):
        self.manifest = manifest
        self.cache = cache
        self.workers = workers
        self._memo: dict[FeatureConfig, list[FeatureMatrix]] = {}

    def __call__(self, cfg: FeatureConfig) -> list[FeatureMatrix]:
        if cfg not in self._memo:
            summary = self.cache.extract(self.manifest, cfg, self.workers)
            if summary.failures:
                ids = ", ".join(e for e, _ in summary.failures[:5])
                raise RuntimeError(f"feature extraction failed for {len(summary.failures)} event(s): {ids}")
            self._memo[cfg] = self.cache.load(self.manifest, cfg)
        return self._memo[cfg]

    def __getstate__(self):
        # worker processes only need what is already extracted
        state = dict(self.__dict__)
        state["workers"] = 1
        return state

