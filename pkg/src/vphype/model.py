"""Full classifier: backbone, prompt injection and head."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .backbone import Backbone, ModelConfig
from .head import ClassifierHead
from .nn import Module
from .prompts import PromptBank, PromptConfig, PromptSystem
from .tensor import Tensor


class VPHype(Module):
    def __init__(
        self,
        config: ModelConfig,
        prompt_config: Optional[PromptConfig] = None,
        bank: Optional[PromptBank] = None,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.config = config
        self.prompt_config = prompt_config or PromptConfig()
        self.bank = bank or PromptBank.synthetic()
        self.seed = seed
        self.backbone = Backbone(config, rng)
        level_dims = [config.dim(level) for level in range(config.num_levels)]
        self.prompts = PromptSystem(self.prompt_config, self.bank, level_dims, rng)
        self.head = ClassifierHead(config.dim(config.num_levels - 1), config.num_classes, rng)

    def features(
        self,
        images: Tensor,
        task_ids: Optional[Sequence[int]] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> tuple[Tensor, np.ndarray]:
        if task_ids is None:
            task_ids = np.zeros(images.shape[0], dtype=np.int64)
        return self.backbone(images, training, rng, self.prompts.hook(task_ids))

    def __call__(
        self,
        images: Tensor,
        task_ids: Optional[Sequence[int]] = None,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        images = images if isinstance(images, Tensor) else Tensor(images)
        feat, mask = self.features(images, task_ids, training, rng)
        return self.head(feat, training, mask)

    def frozen_parameter_names(self) -> list[str]:
        return [f"prompts.{name}" for name in self.prompts.frozen_parameter_names()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        frozen = set(self.frozen_parameter_names())
        return [(name, p) for name, p in self.named_parameters() if name not in frozen]

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            "backbone": self.backbone.num_parameters(),
            "prompts": self.prompts.num_parameters(),
            "head": self.head.num_parameters(),
        }
        counts["total"] = sum(counts.values())
        return counts
