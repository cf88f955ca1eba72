"""Observation files and the bundled example datasets.

An observation file is a two-column CSV, `index,value`.  Indices must be
consecutive ascending integers (calendar years work); the first row is
generation zero.  A value of NA marks an unrecorded generation.  An
optional final row with the literal index `phi` carries the progenitor
count of the last recorded generation.
"""

from __future__ import annotations

from importlib import resources
from typing import List, Optional

from .errors import ParseError
from .laws import ObservedSample

FIXTURES = ("case1", "case2", "case3", "case4", "example2", "seals")


def parse_observations(text: str, origin: str = "<memory>") -> ObservedSample:
    lines = text.splitlines()
    sizes: List[Optional[int]] = []
    phi: Optional[int] = None
    prev_index: Optional[int] = None
    saw_data = False
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ParseError(f"{origin}:{lineno}: expected `index,value`, "
                             f"got {line!r}")
        idx_text, val_text = parts
        if not saw_data and idx_text.lower() == "index":
            continue
        if phi is not None:
            raise ParseError(f"{origin}:{lineno}: the phi row must be last")
        if idx_text == "phi":
            try:
                phi = int(val_text)
            except ValueError:
                raise ParseError(f"{origin}:{lineno}: phi must be an "
                                 f"integer, got {val_text!r}")
            if phi < 0:
                raise ParseError(f"{origin}:{lineno}: phi must be >= 0")
            continue
        try:
            idx = int(idx_text)
        except ValueError:
            raise ParseError(f"{origin}:{lineno}: index must be an integer, "
                             f"got {idx_text!r}")
        if prev_index is not None and idx != prev_index + 1:
            raise ParseError(f"{origin}:{lineno}: indices must be "
                             f"consecutive; {prev_index} is followed by {idx}")
        prev_index = idx
        saw_data = True
        if val_text.upper() == "NA":
            sizes.append(None)
            continue
        try:
            value = int(val_text)
        except ValueError:
            raise ParseError(f"{origin}:{lineno}: value must be an integer "
                             f"or NA, got {val_text!r}")
        if value < 0:
            raise ParseError(f"{origin}:{lineno}: sizes must be >= 0")
        sizes.append(value)
    if not saw_data:
        raise ParseError(f"{origin}: no observation rows found")
    if len(sizes) < 2:
        raise ParseError(f"{origin}: need at least two generations")
    return ObservedSample(sizes=tuple(sizes), last_progenitors=phi)


def load_observations(path: str) -> ObservedSample:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read observations {path}: {exc}")
    return parse_observations(text, origin=path)


def format_observations(sample: ObservedSample, start_index: int = 0) -> str:
    lines = ["index,value"]
    for i, v in enumerate(sample.sizes):
        lines.append(f"{start_index + i},{'NA' if v is None else v}")
    if sample.last_progenitors is not None:
        lines.append(f"phi,{sample.last_progenitors}")
    return "\n".join(lines) + "\n"


def fixture_path(name: str) -> str:
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; "
                       f"available: {', '.join(FIXTURES)}")
    return str(resources.files("cbpabc") / "data" / f"{name}.csv")


def load_fixture(name: str) -> ObservedSample:
    return load_observations(fixture_path(name))


def config_fixture_path(name: str) -> str:
    return str(resources.files("cbpabc") / "data" / "configs" / f"{name}.cfg")
