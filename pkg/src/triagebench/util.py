"""Shared helpers: seed derivation, hashing, proportional quota rounding."""
from __future__ import annotations

import hashlib
import json
from typing import Mapping, Sequence


def stable_hash(text: str) -> str:
    """Hex sha256 of a UTF-8 string."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def stable_json(obj) -> str:
    """Canonical JSON used for hashing and cache keys."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sub_seed(seed: int, name: str) -> int:
    """Derive a named 63-bit sub-seed from the experiment seed.

    Components (split, demo selection, mock models, ...) each draw from
    their own stream so changing one knob never perturbs the others.
    """
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def largest_remainder(weights: Mapping[str, int], total: int) -> dict[str, int]:
    """Apportion `total` among keys proportionally to integer weights.

    Uses the largest-remainder method: each key first receives the floor of
    its exact share, then leftover units go to the largest fractional
    remainders. Ties are broken by lexicographic key order, so the result is
    deterministic. Every quota differs from the exact proportional share by
    less than one unit.
    """
    if total < 0:
        raise ValueError("total must be >= 0")
    pop = sum(weights.values())
    if pop <= 0:
        raise ValueError("weights must sum to a positive population")
    if total > pop:
        raise ValueError(f"cannot apportion {total} among population {pop}")

    shares = {k: total * w / pop for k, w in weights.items()}
    quotas = {k: int(shares[k]) for k in weights}
    leftover = total - sum(quotas.values())
    # Largest remainder first; lexicographic key breaks exact ties.
    order = sorted(weights, key=lambda k: (-(shares[k] - quotas[k]), k))
    for k in order[:leftover]:
        quotas[k] += 1
    return quotas


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def round_half_away_from_zero(x: float) -> int:
    """Round with .5 going away from zero (2.5 -> 3, -2.5 -> -3)."""
    if x >= 0:
        return int(x + 0.5)
    return -int(-x + 0.5)


def format_float(x: float, places: int = 3) -> str:
    return f"{x:.{places}f}"


def mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)
