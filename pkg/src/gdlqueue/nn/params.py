"""Named parameter collections, initialization and JSON checkpoints."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_FORMAT = "gdlqueue-params"
CHECKPOINT_VERSION = 1


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform on ``[-s, s]`` with ``s = sqrt(6 / (fan_in + fan_out))``."""
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping of trainable leaves.

    Names ending in ``.b`` (biases) are excluded from the L2 penalty.
    """

    def add(self, name: str, value, weight: bool = True) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self[name] = t
        if not weight:
            self._biases.add(name)
        return t

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._biases: set[str] = set()

    def weights(self) -> list[Tensor]:
        return [t for n, t in self.items() if n not in self._biases]

    def is_weight(self, name: str) -> bool:
        return name not in self._biases

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.value)) for n, t in self.items()}

    def count(self) -> int:
        return int(sum(t.value.size for t in self.values()))

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, t in self.items():
            out.add(n, t.value.copy(), weight=self.is_weight(n))
        return out

    def load_values(self, other: "ParamSet") -> None:
        for n, t in other.items():
            self[n].value[...] = t.value

    # -- checkpoint ------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "params": [
                {
                    "name": n,
                    "shape": list(t.shape),
                    "weight": self.is_weight(n),
                    "values": t.value.ravel().tolist(),
                }
                for n, t in self.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSet":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a parameter checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        ps = cls()
        for p in d["params"]:
            ps.add(p["name"], np.array(p["values"], dtype=np.float64).reshape(p["shape"]), p["weight"])
        return ps

    def save(self, path, extra: dict | None = None) -> None:
        d = self.to_dict()
        if extra:
            d["extra"] = extra
        Path(path).write_text(json.dumps(d))

    @classmethod
    def load(cls, path) -> tuple["ParamSet", dict]:
        d = json.loads(Path(path).read_text())
        return cls.from_dict(d), d.get("extra", {})
