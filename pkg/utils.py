"""
Utility functions for promptpan.
Provides helpers for seeding, hashing, timing and writing run artifacts.
"""

import os
import csv
import json
import time
import random
import hashlib
import logging
import subprocess
import dataclasses
from functools import wraps
from typing import Any, Callable, Iterable, List, Optional, Sequence

import numpy as np
import torch

from config import settings

logger = logging.getLogger(__name__)


def seed_everything(seed: int):
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)


def configure_torch():
    """Apply thread count and determinism switches from the runtime settings."""
    torch.set_num_threads(max(1, settings.num_threads))
    if settings.deterministic:
        torch.use_deterministic_algorithms(True)


def timed(label: Optional[str] = None):
    """
    Decorator logging the wall-clock duration of a call.

    Args:
        label: Name used in the log line, defaults to the function name
    """
    def decorator(func: Callable) -> Callable:
        name = label or func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.info(f"{name} finished in {time.perf_counter() - start:.1f}s")

        return wrapper
    return decorator


# ─── Hashing ──────────────────────────────────────────────────────────────────

def _jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(',', ':'))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(obj: Any) -> str:
    """Short stable hash of a (dataclass) config."""
    return sha256_bytes(canonical_json(obj).encode())[:16]


_BUILD_ID = None


def build_id() -> str:
    """git-describe style identifier of the source tree, 'unknown' outside git."""
    global _BUILD_ID
    if _BUILD_ID is None:
        try:
            proc = subprocess.run(
                ['git', 'describe', '--always', '--dirty', '--tags'],
                cwd=os.path.dirname(os.path.abspath(__file__)),
                capture_output=True, text=True, timeout=10,
            )
            _BUILD_ID = proc.stdout.strip() if proc.returncode == 0 and proc.stdout.strip() else 'unknown'
        except (OSError, subprocess.SubprocessError):
            _BUILD_ID = 'unknown'
    return _BUILD_ID


# ─── Artifact files ───────────────────────────────────────────────────────────

def write_json(path: str, obj: Any):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + '.tmp'
    with open(tmp, 'w') as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write('\n')
    os.replace(tmp, path)


def read_json(path: str) -> Any:
    with open(path, 'r') as f:
        return json.load(f)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def read_csv(path: str) -> List[dict]:
    with open(path, 'r', newline='') as f:
        return list(csv.DictReader(f))


def format_pct(value: Optional[float]) -> str:
    """Fraction -> percent with one decimal, '-' for missing groups."""
    if value is None:
        return '-'
    return f"{100.0 * value:.1f}"
