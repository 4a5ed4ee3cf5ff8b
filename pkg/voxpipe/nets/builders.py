"""5つのアーキテクチャ: DeepVox generator / discriminator, DeepAAA, 固定 Z の 3D U-Net, SAVE-CT。

各層の初期化 seed は derive_seed(seed, 層名) で決まるので、同じ seed なら
パラメータのバイト列も一致する。プーリング・ストライドは (d, h, w) 順で、
可変 Z のモデルは Z 方向にダウンサンプリングしない。
"""

from typing import List, Tuple

from voxpipe.domain.config import ModelConfig
from voxpipe.domain.seeding import derive_seed
from voxpipe.engine.layers import Conv3d, ConvTranspose3d, Dense, InstanceNorm3d
from voxpipe.engine.tensor import Tensor, concat_channels, crop_like, global_avg_pool3d, maxpool3d, sigmoid
from voxpipe.nets.network import Network

XY_STRIDE = (1, 2, 2)
XY_POOL = (1, 3, 3)
CUBE_POOL = (2, 2, 2)


class _Builder:
    """層名から seed を引いて Network に登録するヘルパ"""

    def __init__(self, net: Network, seed: int, norm: str):
        self.net = net
        self.seed = seed
        self.norm = norm

    def conv(self, name, cin, cout, kernel=(3, 3, 3), stride=(1, 1, 1)):
        return self.net.add(Conv3d(name, cin, cout, kernel, stride, seed=derive_seed(self.seed, name)))

    def up(self, name, cin, cout, stride=XY_STRIDE):
        return self.net.add(ConvTranspose3d(name, cin, cout, (3, 3, 3), stride, seed=derive_seed(self.seed, name)))

    def norm_layer(self, name, channels):
        if self.norm == "instance":
            self.net.add(InstanceNorm3d(name, channels))

    def dense(self, name, fin, fout):
        return self.net.add(Dense(name, fin, fout, seed=derive_seed(self.seed, name)))


class _ConvNet(Network):
    def _cna(self, prefix: str, x: Tensor, kind: str = "leaky_relu") -> Tensor:
        """conv → (instance norm) → 活性化。タップ名は prefix.act"""
        h = self._run(f"{prefix}.conv", x)
        if f"{prefix}.norm" in self._layers:
            h = self._run(f"{prefix}.norm", h)
        return self._tap(f"{prefix}.act", self._act(h, kind))


def _add_cna(b: _Builder, prefix: str, cin: int, cout: int, stride=(1, 1, 1)):
    b.conv(f"{prefix}.conv", cin, cout, stride=stride)
    b.norm_layer(f"{prefix}.norm", cout)
    b.net.tap_point(f"{prefix}.act")


# =============================================================================
# DeepVox generator
# =============================================================================
class DeepVoxGenerator(_ConvNet):
    """U-Net + ResNet 形のエンコーダ・デコーダ（XY だけ半分にしていく）"""

    arch = "deepvox"

    def __init__(self, seed: int, cfg: ModelConfig):
        super().__init__(in_channels=1, slope=cfg.leaky_slope)
        ch = tuple(cfg.generator_channels)
        self.channels = ch
        self.residual_blocks = cfg.residual_blocks
        b = _Builder(self, seed, cfg.norm)
        cin = 1
        for i, c in enumerate(ch):
            _add_cna(b, f"enc{i}", cin, c)
            if i < len(ch) - 1:
                _add_cna(b, f"down{i}", c, c, stride=XY_STRIDE)
            cin = c
        for r in range(cfg.residual_blocks):
            _add_cna(b, f"res{r}.a", ch[-1], ch[-1])
            b.conv(f"res{r}.b.conv", ch[-1], ch[-1])
            b.norm_layer(f"res{r}.b.norm", ch[-1])
            self.tap_point(f"res{r}.out")
        for i in reversed(range(len(ch) - 1)):
            b.up(f"up{i}", ch[i + 1], ch[i])
            b.norm_layer(f"up{i}.norm", ch[i])
            _add_cna(b, f"dec{i}", 2 * ch[i], ch[i])
        b.conv("head.conv", ch[0], 1, kernel=(1, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        h = x
        n = len(self.channels)
        for i in range(n):
            h = self._cna(f"enc{i}", h)
            if i < n - 1:
                skips.append(h)
                h = self._cna(f"down{i}", h)
        for r in range(self.residual_blocks):
            y = self._cna(f"res{r}.a", h)
            y = self._run(f"res{r}.b.conv", y)
            if f"res{r}.b.norm" in self._layers:
                y = self._run(f"res{r}.b.norm", y)
            h = self._tap(f"res{r}.out", self._act(h + y))
        for i in reversed(range(n - 1)):
            u = self._run(f"up{i}", h)
            if f"up{i}.norm" in self._layers:
                u = self._run(f"up{i}.norm", u)
            u = crop_like(self._act(u), skips[i].shape[2:])
            h = self._cna(f"dec{i}", concat_channels(skips[i], u))
        return sigmoid(self._run("head.conv", h))


# =============================================================================
# VGG 形のバックボーン（discriminator と SAVE-CT が共有）
# =============================================================================
class _VggNet(Network):
    def __init__(self, in_channels: int, seed: int, cfg: ModelConfig, convs_per_conv: int):
        super().__init__(in_channels=in_channels, slope=cfg.leaky_slope)
        b = _Builder(self, seed, "none")
        self.blocks: List[List[str]] = []
        cin = in_channels
        for j, (c, n) in enumerate(zip(cfg.discriminator_channels, cfg.discriminator_blocks)):
            names = []
            for k in range(n * convs_per_conv):
                name = f"block{j}.conv{k}"
                b.conv(name, cin, c)
                names.append(name)
                cin = c
            self.tap_point(f"block{j}.pool")
            self.blocks.append(names)
        self.features = cin
        self._builder = b

    def backbone(self, x: Tensor) -> Tensor:
        h = x
        for j, names in enumerate(self.blocks):
            for name in names:
                h = self._tap(name, self._act(self._layers[name](h)))
            h = self._tap(f"block{j}.pool", maxpool3d(h, XY_POOL, XY_STRIDE))
        return h


class DeepVoxDiscriminator(_VggNet):
    """条件付き PatchGAN: 入力は (スキャン, マスク) の2チャネル、出力は線形のパッチスコア"""

    arch = "deepvox_d"

    def __init__(self, seed: int, cfg: ModelConfig):
        super().__init__(2, seed, cfg, convs_per_conv=1)
        self._builder.conv("head.conv", self.features, 1, kernel=(1, 1, 1))

    def head(self, features: Tensor) -> Tensor:
        return self._run("head.conv", features)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.backbone(x))

    def score(self, scan: Tensor, mask: Tensor) -> Tensor:
        return self(concat_channels(scan, mask))


class SaveCT(_VggNet):
    """discriminator の各 conv を2連にし、GAP → dense(1) → sigmoid を付けた分類器"""

    arch = "savect"

    def __init__(self, seed: int, cfg: ModelConfig):
        super().__init__(1, seed, cfg, convs_per_conv=2)
        self._builder.dense("head.dense", self.features, 1)

    def logits(self, x: Tensor) -> Tensor:
        """sigmoid 前のスコア (N, 1)"""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self.check_input(x)
        return self._run("head.dense", global_avg_pool3d(self.backbone(x)))

    def forward(self, x: Tensor) -> Tensor:
        return sigmoid(self.logits(x))

    def last_conv(self) -> str:
        return self.blocks[-1][-1]


# =============================================================================
# U-Net 系ベースライン
# =============================================================================
class _UNet(_ConvNet):
    def __init__(self, seed: int, cfg: ModelConfig, channels: Tuple[int, ...], pool, up_stride, z_policy, fixed_z=None):
        super().__init__(in_channels=1, z_policy=z_policy, fixed_z=fixed_z, slope=cfg.leaky_slope)
        self.channels = tuple(channels)
        self.pool = pool
        b = _Builder(self, seed, cfg.norm)
        cin = 1
        for i, c in enumerate(self.channels):
            _add_cna(b, f"enc{i}.a", cin, c)
            _add_cna(b, f"enc{i}.b", c, c)
            cin = c
        for i in reversed(range(len(self.channels) - 1)):
            b.up(f"up{i}", self.channels[i + 1], self.channels[i], stride=up_stride)
            _add_cna(b, f"dec{i}.a", 2 * self.channels[i], self.channels[i])
            _add_cna(b, f"dec{i}.b", self.channels[i], self.channels[i])
        b.conv("head.conv", self.channels[0], 1, kernel=(1, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        skips = []
        h = x
        n = len(self.channels)
        for i in range(n):
            h = self._cna(f"enc{i}.b", self._cna(f"enc{i}.a", h, "relu"), "relu")
            if i < n - 1:
                skips.append(h)
                h = maxpool3d(h, *self.pool)
        for i in reversed(range(n - 1)):
            u = crop_like(self._act(self._run(f"up{i}", h), "relu"), skips[i].shape[2:])
            h = concat_channels(skips[i], u)
            h = self._cna(f"dec{i}.b", self._cna(f"dec{i}.a", h, "relu"), "relu")
        return sigmoid(self._run("head.conv", h))


class DeepAAA(_UNet):
    arch = "deepaaa"

    def __init__(self, seed: int, cfg: ModelConfig):
        super().__init__(seed, cfg, cfg.deepaaa_channels, (XY_POOL, XY_STRIDE), XY_STRIDE, "variable")


class UNet3DFixed(_UNet):
    arch = "unet3d"

    def __init__(self, seed: int, cfg: ModelConfig):
        super().__init__(seed, cfg, cfg.unet_channels, (CUBE_POOL, CUBE_POOL), CUBE_POOL, "fixed", cfg.fixed_z)


# =============================================================================
def build_deepvox_generator(seed: int, cfg: ModelConfig = ModelConfig()) -> DeepVoxGenerator:
    return DeepVoxGenerator(seed, cfg)


def build_deepvox_discriminator(seed: int, cfg: ModelConfig = ModelConfig()) -> DeepVoxDiscriminator:
    return DeepVoxDiscriminator(seed, cfg)


def build_deepaaa(seed: int, cfg: ModelConfig = ModelConfig()) -> DeepAAA:
    return DeepAAA(seed, cfg)


def build_unet3d_fixed(seed: int, cfg: ModelConfig = ModelConfig()) -> UNet3DFixed:
    return UNet3DFixed(seed, cfg)


def build_savect(seed: int, cfg: ModelConfig = ModelConfig()) -> SaveCT:
    return SaveCT(seed, cfg)


SEGMENTERS = {
    "deepvox": build_deepvox_generator,
    "deepaaa": build_deepaaa,
    "unet3d": build_unet3d_fixed,
}


def build_segmenter(arch: str, seed: int, cfg: ModelConfig = ModelConfig()) -> Network:
    try:
        return SEGMENTERS[arch](seed, cfg)
    except KeyError:
        raise ValueError(f"未知のアーキテクチャ: {arch}")
