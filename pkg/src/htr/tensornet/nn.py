"""Multi-layer perceptrons built from :mod:`htr.tensornet.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np

from htr.errors import InvalidArgumentError
from htr.tensornet import autodiff as ad
from htr.tensornet.autodiff import Param, Tensor

Activation = Literal["relu", "tanh"]


@dataclass
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_layers: Sequence[int] = (64, 64)
    activation: Activation = "relu"

    def __post_init__(self):
        self.hidden_layers = tuple(int(w) for w in self.hidden_layers)
        widths = self.widths
        if any(w < 1 for w in widths):
            raise InvalidArgumentError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ("relu", "tanh"):
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_layers, self.output_dim)

    def param_count(self) -> int:
        w = self.widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


class Mlp:
    """Affine layers with a hidden activation and a linear output.

    Weights are drawn uniformly in ``±1/sqrt(fan_in)``; biases start at zero.
    ``last_layer_scale`` optionally shrinks the output layer's init range.
    """

    def __init__(
        self,
        spec: MlpSpec,
        rng: Optional[np.random.Generator] = None,
        name: str = "mlp",
        last_layer_scale: Optional[float] = None,
    ):
        self.spec = spec
        self.name = name
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[Param] = []
        widths = spec.widths
        n_layers = len(widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            if i == n_layers - 1 and last_layer_scale is not None:
                bound = last_layer_scale
            self.params.append(Param(f"{name}.W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out))))
            self.params.append(Param(f"{name}.b{i}", np.zeros(fan_out)))

    @property
    def layers(self) -> list[tuple[Param, Param]]:
        return list(zip(self.params[0::2], self.params[1::2]))

    def _check_input(self, x_shape: tuple) -> None:
        if x_shape[-1] != self.spec.input_dim:
            raise InvalidArgumentError(
                f"{self.name}: expected input dim {self.spec.input_dim}, got {x_shape[-1]}"
            )

    def __call__(self, x: Union[Tensor, np.ndarray], detach_params: bool = False) -> Tensor:
        """Recorded forward pass on a 2-D batch.

        With ``detach_params`` the weights enter as constants: gradients still
        flow to the input but nothing accumulates in this network's params.
        """
        x = ad.as_tensor(x)
        self._check_input(x.shape)
        act = ad.relu if self.spec.activation == "relu" else ad.tanh
        layers = self.layers
        for i, (W, b) in enumerate(layers):
            if detach_params:
                W, b = Tensor(W.data), Tensor(b.data)
            x = x @ W + b
            if i < len(layers) - 1:
                x = act(x)
        return x

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Untracked forward pass; accepts a single vector or a 2-D batch."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x.shape)
        single = x.ndim == 1
        h = x[None] if single else x
        layers = self.layers
        for i, (W, b) in enumerate(layers):
            h = h @ W.data + b.data
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0) if self.spec.activation == "relu" else np.tanh(h)
        return h[0] if single else h

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def copy_from(self, other: "Mlp") -> None:
        for p, q in zip(self.params, other.params):
            p.data[...] = q.data

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise InvalidArgumentError(f"missing parameter {p.name!r}")
            if state[p.name].shape != p.shape:
                raise InvalidArgumentError(f"shape mismatch for {p.name!r}: {state[p.name].shape} vs {p.shape}")
            p.data[...] = state[p.name]
