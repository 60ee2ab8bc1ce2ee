"""Taxel array rendering for the simulated gripper fingers.

Each finger carries a 4x4 grid of taxels reporting force-proportional
units.  Contact paints an isotropic Gaussian footprint (sigma = 1 taxel
pitch) centered across the finger and positioned along it by the contact
center, which starts at 0.5 and migrates toward 0 as the object slips.
Per-finger values are normalized so they sum to 10 units per newton of
normal force; both fingers mirror the same contact.  Optional multiplicative
noise (uniform within 2 percent) comes from a stream derived from the
episode seed and tick, so rendering is a pure function of the state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SequencingError, ValidationError
from .sim import SimState, contact_state

TAXELS_PER_FINGER = 16
GRID_SIDE = 4
N_TAXELS = 2 * TAXELS_PER_FINGER
C_GAIN_UNITS_PER_N = 10.0
FOOTPRINT_SIGMA = 1.0
NOISE_FRACTION = 0.02
_NOISE_STREAM_TAG = 0x7A78  # keeps taxel noise independent of other streams

_ROWS, _COLS = np.meshgrid(np.arange(GRID_SIDE), np.arange(GRID_SIDE), indexing="ij")
_ROW_TERM = (_ROWS - 1.5) ** 2


@dataclass(frozen=True)
class TaxelFrame:
    """Both fingers' taxel readings at one tick.

    values holds finger A then finger B, each a row-major 4x4 grid.
    """

    t_tick: int
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape != (N_TAXELS,):
            raise ValidationError(
                f"TaxelFrame.values must have shape ({N_TAXELS},), got {self.values.shape}"
            )
        self.values.flags.writeable = False

    def finger(self, index: int) -> np.ndarray:
        """One finger's grid as a 4x4 view (0 = A, 1 = B)."""
        return self.values[index * TAXELS_PER_FINGER : (index + 1) * TAXELS_PER_FINGER].reshape(
            GRID_SIDE, GRID_SIDE
        )

    def finger_sums(self) -> tuple[float, float]:
        return (
            float(self.values[:TAXELS_PER_FINGER].sum()),
            float(self.values[TAXELS_PER_FINGER:].sum()),
        )


def render_taxels(state: SimState, noise: bool = True) -> TaxelFrame:
    """Render the taxel frame for a simulation state."""
    contact = contact_state(state)
    if not contact.in_contact:
        return TaxelFrame(t_tick=state.t_tick, values=np.zeros(N_TAXELS))

    center_col = contact.contact_center * (GRID_SIDE - 1)
    w = np.exp(-((_COLS - center_col) ** 2 + _ROW_TERM) / (2.0 * FOOTPRINT_SIGMA**2))
    grid = w * (C_GAIN_UNITS_PER_N * contact.normal_force_n / w.sum())
    values = np.concatenate([grid.ravel(), grid.ravel()])

    if noise:
        rng = np.random.default_rng((state.rng_seed, state.t_tick, _NOISE_STREAM_TAG))
        values = values * (1.0 + rng.uniform(-NOISE_FRACTION, NOISE_FRACTION, N_TAXELS))
    return TaxelFrame(t_tick=state.t_tick, values=values)


def delta_frame(curr: TaxelFrame, prev: TaxelFrame) -> np.ndarray:
    """Elementwise change between two consecutive frames."""
    if curr.t_tick != prev.t_tick + 1:
        raise SequencingError(
            f"delta_frame needs consecutive ticks, got {prev.t_tick} -> {curr.t_tick}"
        )
    return curr.values - prev.values
