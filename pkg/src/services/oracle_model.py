"""
Oracle predictor for testing and development.
Returns ground truth instead of running a network, so the nested pipeline,
metrics and reports can be exercised without trained checkpoints.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Iterable

import numpy as np

from src.errors import ContractError
from src.services.synth_data import ReservoirSample

if TYPE_CHECKING:
    from src.workflows.nested_pipeline import LevelRequest

logger = logging.getLogger(__name__)


class OracleModel:
    """
    Predictor that looks up the truth of the requested sample, level and well.

    Usage:
        oracle = OracleModel("pressure", 2, test_samples)
        models = NestedModelSet(**OracleModel.for_levels(test_samples, 4))

    Args:
        field_kind: "pressure" or "saturation".
        level: Level this predictor stands in for.
        samples: Samples whose truth is served, looked up by id.
        offset: Constant added to every prediction (to emulate a biased model).
    """

    def __init__(self, field_kind: str, level: int, samples: Iterable[ReservoirSample], offset: float = 0.0):
        self.field_kind = field_kind
        self.level = level
        self.offset = offset
        self._samples = {s.id: s for s in samples}
        logger.debug(f"OracleModel {field_kind} level {level} serving {len(self._samples)} samples")

    def predict(self, request: "LevelRequest") -> np.ndarray:
        sample = self._samples.get(request.sample_id)
        if sample is None:
            raise ContractError(f"oracle has no truth for sample {request.sample_id}")
        truth = sample.truth(self.field_kind, self.level, request.well)
        return truth[request.time_index] + self.offset

    @classmethod
    def for_levels(cls, samples: list[ReservoirSample], max_level: int,
                   offset: float = 0.0) -> dict[str, dict[int, "OracleModel"]]:
        """Oracles for every pressure level ``0..max_level`` and saturation level ``1..max_level``."""
        return {
            "pressure": {k: cls("pressure", k, samples, offset) for k in range(max_level + 1)},
            "saturation": {k: cls("saturation", k, samples, offset) for k in range(1, max_level + 1)},
        }
