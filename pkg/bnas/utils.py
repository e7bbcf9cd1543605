"""Small formatting helpers used across the package."""
from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence

BLOCKS = "▁▂▃▄▅▆▇█"


SI_UNITS = ("", "K", "M", "G", "T", "P")
BINARY_UNITS = ("B", "KiB", "MiB", "GiB", "TiB")


def _scaled(value: Optional[float], base: float, units: Sequence[str], sep: str = "") -> str:
    """Divide by `base` until the magnitude drops below it or the units run out."""
    if value is None or not math.isfinite(float(value)):
        return "n/a"
    value = float(value)
    rank = 0
    while abs(value) >= base and rank < len(units) - 1:
        value /= base
        rank += 1
    return f"{value:.2f}{sep}{units[rank]}"


def human_number(x: Optional[float]) -> str:
    """Op counts with SI prefixes: 1_500 -> '1.50K', 3.12e9 -> '3.12G'."""
    return _scaled(x, 1000.0, SI_UNITS)


def human_bytes(bits: Optional[float]) -> str:
    """A bit count as storage: 8 * 1024 -> '1.00 KiB'."""
    return _scaled(None if bits is None else float(bits) / 8.0, 1024.0, BINARY_UNITS, sep=" ")


def sparkline(values: Iterable[float], lo: Optional[float] = None, hi: Optional[float] = None) -> str:
    """Unicode block sparkline, scaled to [lo, hi] (the data's own range by default)."""
    vals = [float(v) for v in values if math.isfinite(float(v))]
    if not vals:
        return ""
    lo = min(vals) if lo is None else lo
    hi = max(vals) if hi is None else hi
    if hi <= lo:
        return BLOCKS[0] * len(vals)
    span = hi - lo
    top = len(BLOCKS) - 1
    return "".join(BLOCKS[min(top, max(0, int((v - lo) / span * top)))] for v in vals)
