"""Parameter container pairing a value array with lazily allocated gradient."""

from __future__ import annotations

import numpy as np


class Tensor:
    """A named parameter: float data plus same-shaped gradient storage."""

    __slots__ = ("name", "data", "_grad")

    def __init__(self, data: np.ndarray, name: str = ""):
        self.name = name
        self.data = np.asarray(data)
        self._grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        if value.shape != self.data.shape:
            raise ValueError(f"grad shape {value.shape} != data shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        if self._grad is not None:
            self._grad[...] = 0.0

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.data.shape})"
