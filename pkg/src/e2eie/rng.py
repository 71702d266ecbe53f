from __future__ import annotations

import numpy as np

# 一つのシード値から各コンポーネント用の乱数列を派生させる（番号は固定）
INIT = 0
SPLIT = 1
SHUFFLE = 2
DROPOUT = 3
BOOTSTRAP = 4


def derive_rng(seed: int, stream: int) -> np.random.Generator:
    """シード値とストリーム番号から独立な乱数生成器を作る。

    Examples:
        >>> derive_rng(42, INIT).integers(10) == derive_rng(42, INIT).integers(10)
        True
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative: {seed}")
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))
