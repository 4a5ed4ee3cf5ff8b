"""グローバルシードから各モジュール用のシードを派生させる。

SeedSequence の spawn_key を使うので、キーが違えば独立、同じなら再現可能。
文字列キーは安定なハッシュ（crc32）で整数にする。
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(k: Key) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k)


def derive_seed(seed: int, *keys: Key) -> int:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(seed: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key_to_int(k) for k in keys)))
