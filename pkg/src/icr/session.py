"""The interactive refinement loop.

A driver produces the initial segmentation and consumes clicks to refine
it. Two-stage drivers pair a 2-channel standard network with a 5-channel
refinement network; single-stage drivers use one 5-channel network with
neutral inputs for the initial pass. Ensembles average member
probabilities and broadcast every sampled click to all members.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clicks import Click, ClickSet, encode_clicks, simulate_click
from .errors import DataError, ModelError
from .metrics import MetricReport, evaluate_masks
from .nn.unet import ResUNet3d
from .volume import BinaryMask, CaseRecord, Grid3, ProbMap, ct_normalize, pet_znormalize

NEUTRAL_PROB = 0.5


def preprocess_case(case: CaseRecord) -> CaseRecord:
    """Windowed CT and z-scored PET; ground truth carried through."""
    return CaseRecord(case.case_id, ct_normalize(case.ct), pet_znormalize(case.pet), case.gtv)


def channels_from_preprocessed(case: CaseRecord) -> np.ndarray:
    """(2, nx, ny, nz) network input from an already-preprocessed case."""
    return np.stack([case.ct.values, case.pet.values]).astype(np.float32)


def case_input_channels(case: CaseRecord) -> np.ndarray:
    """Preprocessed (2, nx, ny, nz) network input: windowed CT, z-scored PET."""
    return channels_from_preprocessed(preprocess_case(case))


def stack_refine_input(
    x: np.ndarray, prev_prob: np.ndarray, positive: np.ndarray, negative: np.ndarray
) -> np.ndarray:
    return np.concatenate(
        [x, prev_prob[None], positive[None], negative[None]], axis=0
    ).astype(np.float32)


@dataclass
class DriverState:
    """Probabilities after the latest event; member_probs only for ensembles."""

    prob: np.ndarray
    member_probs: list[np.ndarray] | None = None


class TwoStageDriver:
    """Standard network for the initial pass, refinement network afterwards."""

    def __init__(self, standard: ResUNet3d, refiner: ResUNet3d):
        if standard.config.in_channels != 2:
            raise ModelError("standard network must take 2 input channels")
        if refiner.config.in_channels != 5:
            raise ModelError("refinement network must take 5 input channels")
        self.standard = standard
        self.refiner = refiner

    def initial(self, x: np.ndarray) -> DriverState:
        return DriverState(self.standard.predict_prob(x))

    def refine(self, x: np.ndarray, state: DriverState, positive, negative) -> DriverState:
        inp = stack_refine_input(x, state.prob, positive, negative)
        return DriverState(self.refiner.predict_prob(inp))


class SingleStageDriver:
    """One 5-channel network for both passes; the initial pass sees a
    0.5-filled previous mask and empty guidance."""

    def __init__(self, net: ResUNet3d):
        if net.config.in_channels != 5:
            raise ModelError("single-stage network must take 5 input channels")
        self.net = net

    def initial(self, x: np.ndarray) -> DriverState:
        neutral = np.full(x.shape[1:], NEUTRAL_PROB, dtype=np.float32)
        zeros = np.zeros(x.shape[1:], dtype=np.float32)
        inp = stack_refine_input(x, neutral, zeros, zeros)
        return DriverState(self.net.predict_prob(inp))

    def refine(self, x: np.ndarray, state: DriverState, positive, negative) -> DriverState:
        inp = stack_refine_input(x, state.prob, positive, negative)
        return DriverState(self.net.predict_prob(inp))


def combine_probs(member_probs: list[np.ndarray]) -> np.ndarray:
    """Voxelwise arithmetic mean; exact for identical members."""
    acc = np.zeros(member_probs[0].shape, dtype=np.float64)
    for p in member_probs:
        acc += p
    return (acc / len(member_probs)).astype(np.float32)


class EnsembleDriver:
    """Average of member probabilities; every member receives the same
    clicks and feeds back its own previous output."""

    def __init__(self, members: list):
        if not members:
            raise ModelError("ensemble needs at least one member")
        self.members = members
        configs = [c for c in (self._member_config(m) for m in members) if c is not None]
        if configs and any(c != configs[0] for c in configs):
            raise ModelError("ensemble members must share a network configuration")

    @staticmethod
    def _member_config(member):
        if isinstance(member, TwoStageDriver):
            return (member.standard.config, member.refiner.config)
        if isinstance(member, SingleStageDriver):
            return (member.net.config,)
        return None

    def initial(self, x: np.ndarray) -> DriverState:
        probs = [m.initial(x).prob for m in self.members]
        return DriverState(combine_probs(probs), probs)

    def refine(self, x: np.ndarray, state: DriverState, positive, negative) -> DriverState:
        assert state.member_probs is not None
        probs = [
            m.refine(x, DriverState(prev), positive, negative).prob
            for m, prev in zip(self.members, state.member_probs)
        ]
        return DriverState(combine_probs(probs), probs)


@dataclass
class SessionState:
    """Loop state: event counter, accumulated clicks, current probabilities."""

    case: CaseRecord
    x: np.ndarray = field(repr=False)
    driver_state: DriverState = field(repr=False)
    clicks: ClickSet = field(default_factory=ClickSet)
    changed_history: list[int] = field(default_factory=list)

    @property
    def t(self) -> int:
        return len(self.clicks)

    @property
    def grid(self) -> Grid3:
        return self.case.grid

    @property
    def current(self) -> ProbMap:
        return ProbMap(self.grid, self.driver_state.prob)

    def current_mask(self) -> BinaryMask:
        return self.current.threshold()


def start_session(driver, case: CaseRecord) -> SessionState:
    """Initial segmentation; t = 0 with no clicks."""
    x = case_input_channels(case)
    return SessionState(case, x, driver.initial(x))


def apply_click(driver, state: SessionState, click: Click) -> SessionState:
    """One refinement event: extend the click set, rerun the refiner on
    the latest output plus guidance, and record changed voxels."""
    grid = state.grid
    if any(not 0 <= click.coord[a] < grid.dims[a] for a in range(3)):
        raise ValueError(f"click {click.coord} outside grid {grid.dims}")
    clicks = state.clicks.extended(click)
    guidance = encode_clicks(clicks, grid)
    prev_mask = state.current_mask().values
    new_state = driver.refine(state.x, state.driver_state, guidance.positive, guidance.negative)
    new_mask = (new_state.prob > 0.5).astype(np.uint8)
    changed = int((new_mask != prev_mask).sum())
    return SessionState(
        state.case, state.x, new_state, clicks, state.changed_history + [changed]
    )


@dataclass(frozen=True)
class LoopEvent:
    t: int
    report: MetricReport
    click: Click | None


def run_loop(
    driver,
    case: CaseRecord,
    budget: int,
    rng: np.random.Generator,
) -> list[LoopEvent]:
    """Initial segmentation plus up to `budget` simulated click events.

    Stops early once the prediction matches the ground truth. Returns one
    row per event including t=0.
    """
    if case.gtv is None:
        raise DataError(f"case {case.case_id} has no ground truth; cannot simulate clicks")
    state = start_session(driver, case)
    events = [LoopEvent(0, evaluate_masks(state.current_mask(), case.gtv, 0), None)]
    for t in range(1, budget + 1):
        click = simulate_click(state.current, case.gtv, rng, event_index=t)
        if click is None:
            break
        state = apply_click(driver, state, click)
        report = evaluate_masks(state.current_mask(), case.gtv, state.changed_history[-1])
        events.append(LoopEvent(t, report, click))
    return events
