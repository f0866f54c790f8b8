"""Linear-layer containers shared by transforms, mitigation and the pipeline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .linalg import as_matrix


@dataclass(frozen=True)
class LayerBundle:
    """One linear layer ``Y = X @ W + bias`` plus its calibration inputs.

    Attributes:
        name: Layer identifier, used in reports and error messages.
        w: Weight, shape ``(C_in, C_out)``.
        calib: Calibration activations, shape ``(tokens, C_in)``.
        bias: Optional bias of length ``C_out``.
    """

    name: str
    w: np.ndarray
    calib: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        w = as_matrix(self.w, f"{self.name}.w")
        calib = as_matrix(self.calib, f"{self.name}.calib")
        if calib.shape[1] != w.shape[0]:
            raise ValidationError(
                f"{self.name}: calib has {calib.shape[1]} channels, weight expects {w.shape[0]}"
            )
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "calib", calib)
        if self.bias is not None:
            bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if bias.shape != (w.shape[1],):
                raise ValidationError(
                    f"{self.name}: bias has length {bias.size}, expected {w.shape[1]}"
                )
            if not np.all(np.isfinite(bias)):
                raise ValidationError(f"{self.name}.bias contains NaN or Inf")
            object.__setattr__(self, "bias", bias)

    @property
    def c_in(self) -> int:
        return self.w.shape[0]

    @property
    def c_out(self) -> int:
        return self.w.shape[1]

    @property
    def tokens(self) -> int:
        return self.calib.shape[0]

    def output(self, x: np.ndarray | None = None) -> np.ndarray:
        x = self.calib if x is None else x
        y = x @ self.w
        return y if self.bias is None else y + self.bias

    def replace(self, **changes) -> LayerBundle:
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ModelBundle:
    """An ordered collection of independent layers."""

    layers: tuple[LayerBundle, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)
