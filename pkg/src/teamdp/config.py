"""Run configuration stored as flat ``key = value`` text.

Floats are written with ``repr``, the shortest decimal string that parses
back to the same double, so files round-trip exactly on every platform.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Any

from .beliefs import RecursionMode
from .model import ModelParams

PARAM_KEYS = ("p1", "p2", "alpha0", "alpha1", "c", "r", "beta")


@dataclass(frozen=True)
class RunConfig:
    p1: float = 0.3
    p2: float = 0.3
    alpha0: float = 0.75
    alpha1: float = 0.75
    c: float = 0.3
    r: float = 1.0
    beta: float = 0.9
    cap_k: int = 60
    cap_m: int = 60
    mode: str = "bayes"
    tol: float = 1e-10
    seed: int = 0
    episodes: int = 200_000
    out: str | None = None

    def __post_init__(self):
        self.params  # range checks live in ModelParams
        RecursionMode.parse(self.mode)
        if self.cap_k < 2 or self.cap_m < 2:
            raise ValueError("caps must be at least 2")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")

    @property
    def params(self) -> ModelParams:
        return ModelParams(**{k: getattr(self, k) for k in PARAM_KEYS})

    @property
    def recursion(self) -> RecursionMode:
        return RecursionMode.parse(self.mode)

    def replace(self, **changes: Any) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict[str, Any] = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (x.strip() for x in line.partition("="))
            if not sep or key not in types:
                raise ValueError(f"line {n}: cannot parse {raw!r}")
            values[key] = _convert(types[key], val)
        return cls(**values)

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.loads(fh.read())


def _convert(typ: str, val: str):
    if typ == "float":
        return float(val)
    if typ == "int":
        return int(val)
    return val
