"""パラメータを持つ層（Conv3d / ConvTranspose3d / InstanceNorm3d / Dense）"""

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from voxpipe.engine.tensor import (
    DEFAULT_DTYPE,
    Tensor,
    conv3d,
    conv3d_transpose,
    dense,
    he_normal_init,
    instance_norm,
)


@dataclass(eq=False)
class Param:
    tensor: Tensor
    name: str
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.tensor.shape


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Layer:
    """名前付き Param を持つ呼び出し可能オブジェクト"""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self._params: List[Param] = []

    def _add(self, suffix: str, t: Tensor, trainable: bool = True) -> Tensor:
        self._params.append(Param(t, f"{self.name}.{suffix}", trainable))
        return t

    def params(self) -> List[Param]:
        return list(self._params)

    def __call__(self, x: Tensor) -> Tensor:
        raise NotImplementedError


class Conv3d(Layer):
    kind = "conv"

    def __init__(self, name: str, cin: int, cout: int, kernel=(3, 3, 3), stride=(1, 1, 1), seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        kernel = tuple(kernel)
        self.stride = tuple(stride)
        fan_in = cin * int(np.prod(kernel))
        self.w = self._add("w", he_normal_init((cout, cin) + kernel, fan_in, seed, dtype))
        self.b = self._add("b", _zeros((cout,), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.w, self.b, self.stride, "same")


class ConvTranspose3d(Layer):
    kind = "conv_transpose"

    def __init__(self, name: str, cin: int, cout: int, kernel=(3, 3, 3), stride=(1, 2, 2), seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        kernel = tuple(kernel)
        self.stride = tuple(stride)
        fan_in = cin * int(np.prod(kernel))
        self.w = self._add("w", he_normal_init((cin, cout) + kernel, fan_in, seed, dtype))
        self.b = self._add("b", _zeros((cout,), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d_transpose(x, self.w, self.b, self.stride)


class InstanceNorm3d(Layer):
    kind = "norm"

    def __init__(self, name: str, channels: int, eps: float = 1e-5, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.eps = eps
        self.gamma = self._add("gamma", Tensor(np.ones((channels,), dtype=dtype), requires_grad=True))
        self.beta = self._add("beta", _zeros((channels,), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return instance_norm(x, self.gamma, self.beta, self.eps)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name: str, fin: int, fout: int, seed: int = 0, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.w = self._add("w", he_normal_init((fin, fout), fin, seed, dtype))
        self.b = self._add("b", _zeros((fout,), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.w, self.b)


def param_dict(layers) -> Dict[str, Param]:
    out: Dict[str, Param] = {}
    for layer in layers:
        for p in layer.params():
            if p.name in out:
                raise ValueError(f"パラメータ名が重複しています: {p.name}")
            out[p.name] = p
    return out
