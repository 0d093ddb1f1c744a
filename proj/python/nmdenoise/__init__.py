"""Residual-domain image denoiser with a shared-decoder autoencoder."""

from __future__ import annotations

import os
from typing import Mapping

from ._core import (
    ConfigError,
    NumericError,
    ShapeError,
    default_config,
    gradcheck,
    psnr,
    sample_noise,
    ssim,
    synth,
)
from ._core import Trainer as _Trainer

__all__ = [
    "ConfigError",
    "NumericError",
    "ShapeError",
    "Trainer",
    "default_config",
    "gradcheck",
    "psnr",
    "sample_noise",
    "ssim",
    "synth",
]


def _format(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


class Trainer(_Trainer):
    """Trainer sized for the dataset in `data_dir`; `config` takes the same keys as the CLI config file."""

    def __init__(self, data_dir: str | os.PathLike, config: Mapping[str, object] | None = None):
        kv = {k: _format(v) for k, v in (config or {}).items()}
        super().__init__(kv, os.fspath(data_dir))
