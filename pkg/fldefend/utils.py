"""
Common helpers: seed derivation and artifact writers.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict

import numpy as np
import pandas as pd

# Shared float format for every CSV artifact so reruns are byte-identical.
FLOAT_FORMAT = "%.12g"


def derive_seed(master_seed: int, *parts: Any) -> int:
    """Derive a 32-bit seed from the master seed and a purpose path.

    derive_seed(7, "round", 3, "select") is independent of how many other
    streams were drawn before it, so adding draws elsewhere never shifts it.
    """
    key = "|".join(str(p) for p in (master_seed, *parts))
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def rng_for(master_seed: int, *parts: Any) -> np.random.Generator:
    """numpy Generator seeded from derive_seed."""
    return np.random.default_rng(derive_seed(master_seed, *parts))


def canonical_json(data: Any) -> str:
    """JSON with sorted keys and no whitespace variance, used for hashing."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_json_default)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json(data: Dict[str, Any], path: Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def write_frame(df: pd.DataFrame, path: Path) -> None:
    """Write a dataframe as CSV with the shared float format."""
    df.to_csv(Path(path), index=False, encoding="utf-8", float_format=FLOAT_FORMAT, lineterminator="\n")


def _json_default(value: Any):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
