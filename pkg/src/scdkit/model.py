"""Full bi-temporal model: shared encoder, change branch, semantic twins."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .backbone import SiameseEncoder
from .config import ModelConfig
from .decoders import BcdDecoder, ScdDecoder
from .errors import ShapeError


@dataclass
class ModelOutput:
    """Logits at input resolution plus the intermediate change maps."""

    change_logits: Tensor  # (B, 2, H, W)
    sem_logits_t1: Tensor  # (B, N, H, W)
    sem_logits_t2: Tensor  # (B, N, H, W)
    change_maps: tuple[Tensor, Tensor, Tensor, Tensor]


class ChangeDetectionModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.encoder = SiameseEncoder(config)
        self.bcd = BcdDecoder(config)
        self.sem_t1 = ScdDecoder(config)
        self.sem_t2 = ScdDecoder(config)

    def forward(self, img_t1: Tensor, img_t2: Tensor) -> ModelOutput:
        if img_t1.shape != img_t2.shape:
            raise ShapeError(
                f"timestamp images differ in shape: {tuple(img_t1.shape)} vs {tuple(img_t2.shape)}"
            )
        pyr_t1 = self.encoder(img_t1)
        pyr_t2 = self.encoder(img_t2)
        bcd = self.bcd(pyr_t1, pyr_t2)
        sem_t1 = self.sem_t1(pyr_t1, bcd.change_maps)
        sem_t2 = self.sem_t2(pyr_t2, bcd.change_maps)
        return ModelOutput(
            change_logits=bcd.logits,
            sem_logits_t1=sem_t1,
            sem_logits_t2=sem_t2,
            change_maps=bcd.change_maps,
        )

    def set_cga(self, enabled: bool) -> None:
        self.sem_t1.use_cga = enabled
        self.sem_t2.use_cga = enabled
        self.config.cga = enabled


def _module_seed(seed: int, name: str) -> int:
    return zlib.crc32(f"{seed}:{name}".encode())


def build_model(config: ModelConfig) -> ChangeDetectionModel:
    """Construct with all weights drawn from the config seed.

    Every module is re-initialised under a seed keyed to its qualified name,
    not to its position in the global draw order.  Two builds that differ
    structurally (a fusion branch toggled off, say) therefore start any
    submodule they share from bitwise-identical weights, so ablation runs
    compare optimisation behaviour rather than initialisation luck.
    """
    config.validate()
    torch.manual_seed(config.seed)
    model = ChangeDetectionModel(config)
    for name, module in model.named_modules():
        reset = getattr(module, "reset_parameters", None)
        if reset is None:
            reset = getattr(module, "_reset_parameters", None)
        if callable(reset):
            torch.manual_seed(_module_seed(config.seed, name))
            reset()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
