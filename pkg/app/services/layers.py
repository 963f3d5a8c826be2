from typing import Dict, Iterator, List, Tuple

import numpy as np

from app.errors import ShapeError
from app.services import numerics as nx
from app.services.numerics import Tensor

LAYER_NORM_EPS = 1e-5


class ParameterStore:
    """Ordered map from dotted parameter names to trainable tensors.

    Layers keep names, not tensors, and look parameters up on every call, so a
    tensor can be swapped out (gradient checks, checkpoint loads) without
    rebuilding the model.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> str:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name}")
        self._params[name] = Tensor(values, requires_grad=True, name=name)
        return name

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, tensor: Tensor):
        if name not in self._params:
            raise KeyError(name)
        if tensor.shape != self._params[name].shape:
            raise ShapeError(f"{name}: expected {self._params[name].shape}, got {tensor.shape}")
        self._params[name] = tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, values in arrays.items():
            self[name] = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """y = x @ W (+ b), W of shape (fan_in, fan_out) ~ U(+-1/sqrt(fan_in))."""

    def __init__(self, store: ParameterStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, bias: bool = True, zero_init: bool = False):
        self.store = store
        weights = np.zeros((fan_in, fan_out)) if zero_init else uniform_init(rng, fan_in, (fan_in, fan_out))
        self.weight = store.add(f"{name}.weight", weights)
        self.bias = store.add(f"{name}.bias", np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = nx.matmul(x, self.store[self.weight])
        if self.bias is not None:
            y = y + self.store[self.bias]
        return y

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Tape-free evaluation on a raw array."""
        y = x @ self.store[self.weight].data
        if self.bias is not None:
            y = y + self.store[self.bias].data
        return y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.store = store
        self.gain = store.add(f"{name}.gain", np.ones(dim))
        self.bias = store.add(f"{name}.bias", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.store[self.gain], self.store[self.bias], LAYER_NORM_EPS)

    def apply(self, x: np.ndarray) -> np.ndarray:
        centered = x - x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + LAYER_NORM_EPS)
        return centered * inv_std * self.store[self.gain].data + self.store[self.bias].data
