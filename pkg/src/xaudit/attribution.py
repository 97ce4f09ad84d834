from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(eq=False)
class Attribution:
    """Per-feature attribution of one decision.

    ``flags`` holds boolean diagnostics (``degenerate``, ``zero``, ...) and
    ``info`` holds numeric side results such as surrogate fidelity.
    """

    values: np.ndarray
    base_value: float
    instance: np.ndarray
    method_tag: str
    flags: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.instance = np.asarray(self.instance, dtype=float)
        if self.values.shape != self.instance.shape:
            raise ValueError("attribution and instance dimensions differ")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution values must be finite")

    @property
    def d(self) -> int:
        return self.values.shape[0]

    def top(self) -> int:
        """Index of the largest |value|, lowest index on ties."""
        return int(np.argmax(np.abs(self.values)))

    def to_json(self) -> dict:
        out = {
            "method_tag": self.method_tag,
            "base_value": float(self.base_value),
            "values": [float(v) for v in self.values],
            "instance": [float(v) for v in self.instance],
        }
        if self.flags:
            out["flags"] = {k: bool(v) for k, v in sorted(self.flags.items())}
        if self.info:
            out["info"] = {k: _plain(v) for k, v in sorted(self.info.items())}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Attribution":
        return cls(
            np.array(obj["values"], dtype=float), obj["base_value"], np.array(obj["instance"], dtype=float),
            obj["method_tag"], dict(obj.get("flags", {})), dict(obj.get("info", {})),
        )


def _plain(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v
