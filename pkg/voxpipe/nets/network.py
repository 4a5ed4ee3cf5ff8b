"""Network 基底クラス: 名前付き層の登録、パラメータ辞書、Grad-CAM 用のタップ"""

import contextlib
import logging
from typing import Dict, List, Optional

import numpy as np

from voxpipe.domain.errors import CheckpointMismatch, LayerNotFound, WrongInputShape
from voxpipe.engine.layers import Layer, Param, param_dict
from voxpipe.engine.tensor import Tensor, activation, no_grad

_log = logging.getLogger("voxpipe.nets")


class Network:
    arch = "network"

    def __init__(self, in_channels: int, z_policy: str = "variable", fixed_z: Optional[int] = None, slope: float = 0.2):
        self.in_channels = in_channels
        self.z_policy = z_policy
        self.fixed_z = fixed_z
        self.slope = slope
        self._layers: Dict[str, Layer] = {}
        self._taps: List[str] = []
        self._capture: Optional[str] = None
        self.captured: Optional[Tensor] = None

    # ------------------------------------------------------------------
    # 構築
    def add(self, layer: Layer) -> Layer:
        if layer.name in self._layers:
            raise ValueError(f"層の名前が重複しています: {layer.name}")
        self._layers[layer.name] = layer
        return layer

    def tap_point(self, name: str) -> None:
        """層ではないが Grad-CAM で参照できる中間出力の名前"""
        self._taps.append(name)

    @property
    def input_spec(self) -> dict:
        return {"channels": self.in_channels, "z_policy": self.z_policy, "fixed_z": self.fixed_z}

    def layer(self, name: str) -> Layer:
        try:
            return self._layers[name]
        except KeyError:
            raise LayerNotFound(name)

    def layer_names(self) -> List[str]:
        return list(self._layers)

    def conv_layers(self, include_head: bool = False) -> List[str]:
        return [n for n, layer in self._layers.items() if layer.kind == "conv" and (include_head or not n.startswith("head"))]

    # ------------------------------------------------------------------
    # パラメータ
    def params(self) -> Dict[str, Param]:
        return param_dict(self._layers.values())

    def trainable(self) -> List[Param]:
        return [p for p in self.params().values() if p.trainable]

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params().values()))

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.tensor.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.params()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointMismatch(f"{self.arch}: パラメータ名が一致しません missing={missing[:3]} extra={extra[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise CheckpointMismatch(f"{self.arch}: {name} の形状 {arr.shape} != {p.shape}")
            p.tensor.data = arr.astype(p.data.dtype, copy=True)

    # ------------------------------------------------------------------
    # 順伝播
    def _run(self, name: str, x: Tensor) -> Tensor:
        return self._tap(name, self._layers[name](x))

    def _tap(self, name: str, t: Tensor) -> Tensor:
        if self._capture == name:
            self.captured = t.retain_grad()
        return t

    def _act(self, x: Tensor, kind: str = "leaky_relu") -> Tensor:
        return activation(x, kind, self.slope)

    @contextlib.contextmanager
    def capture(self, name: str):
        """with net.capture("block5.conv2"): ... の間、その出力を self.captured に残す"""
        if name not in self._layers and name not in self._taps:
            raise LayerNotFound(name)
        self._capture, self.captured = name, None
        try:
            yield self
        finally:
            self._capture = None

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise WrongInputShape(f"{self.arch}: 入力は (N, {self.in_channels}, Z, Y, X): {x.shape}")
        if self.z_policy == "fixed" and x.shape[2] != self.fixed_z:
            raise WrongInputShape(f"{self.arch}: Z は {self.fixed_z} 固定（reshape_z を使う）: Z={x.shape[2]}")

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        self.check_input(x)
        return self.forward(x)

    def infer(self, x) -> np.ndarray:
        with no_grad():
            return self(x).data
