"""Deterministic CSV emission shared by the generator, CLI, and reports."""

from __future__ import annotations

import csv
import math
import os


def fmt(value) -> str:
    """Shortest exact decimal for floats; NaN becomes the empty cell."""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(float(value))  # plain float repr round-trips exactly
    if hasattr(value, "item") and not isinstance(value, (str, bytes)):
        return fmt(value.item())
    return str(value)


def write_csv(path: str, header: list[str], rows) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
