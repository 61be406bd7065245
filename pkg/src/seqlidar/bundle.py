"""Condition bundle shared by the sampler, the network and the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from seqlidar.errors import DimensionError


@dataclass
class ConditionBundle:
    """Road sketch, object prior and caption tokens for one sequence or a batch.

    ``sketch`` and ``prior`` are [F, 2, H, W] for one sequence or
    [B, F, 2, H, W] for a batch; ``caption`` is then a token list or a list
    of token lists respectively.
    """

    sketch: np.ndarray
    prior: np.ndarray
    caption: list = field(default_factory=list)

    def __post_init__(self):
        self.sketch = np.asarray(self.sketch, dtype=np.float32)
        self.prior = np.asarray(self.prior, dtype=np.float32)
        if self.sketch.shape != self.prior.shape:
            raise DimensionError(f"sketch {self.sketch.shape} and prior {self.prior.shape} differ")
        if self.sketch.ndim not in (4, 5) or self.sketch.shape[-3] != 2:
            raise DimensionError(f"conditions must be [..., F, 2, H, W], got {self.sketch.shape}")
        if self.is_batched:
            self.caption = [list(map(int, c)) for c in self.caption]
            if len(self.caption) != self.sketch.shape[0]:
                raise DimensionError("one caption per batch element is required")
        else:
            self.caption = list(map(int, self.caption))

    @property
    def is_batched(self):
        return self.sketch.ndim == 5

    @property
    def frames(self):
        return self.sketch.shape[-4]

    def batched(self):
        if self.is_batched:
            return self
        return ConditionBundle(self.sketch[None], self.prior[None], [self.caption])

    def __getitem__(self, i):
        if not self.is_batched:
            raise IndexError("bundle is not batched")
        return ConditionBundle(self.sketch[i], self.prior[i], self.caption[i])

    @staticmethod
    def stack(bundles):
        bundles = [b.batched() for b in bundles]
        return ConditionBundle(
            np.concatenate([b.sketch for b in bundles]),
            np.concatenate([b.prior for b in bundles]),
            [c for b in bundles for c in b.caption],
        )
