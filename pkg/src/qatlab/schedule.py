"""Precision-pruning state machine.

Between epochs the scheduler watches each layer's LSB-nonzero rate (the
fraction of weights whose low-bit slice is nonzero) and the model's size
fraction, and decides which layers drop precision and by how much. Once
the target size fraction is reached the run flips to a plain finetune
phase: bits freeze and the sparsity regularizer shuts off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, StateError
from .quantize import LayerQuantState, QuantizerKind, lsb_code
from .sensitivity import SensitivityRecord, assign_prune_speed

FULL_PRECISION_BITS = 32

PHASE_PRUNING = "pruning"
PHASE_FINETUNE = "finetune"


@dataclass
class ScheduleConfig:
    """Knobs of the pruning loop.

    ``gamma_target`` is the target size fraction (1 / target compression
    ratio). ``deadline`` is the first epoch whose event ignores the
    nonzero-rate gate; None resolves to the last event epoch before 75%
    of the run (see :func:`resolve_deadline`).
    """

    lam: float = 5e-5
    interval: int = 20
    alpha: float = 0.3
    gamma_target: float = 1.0
    deadline: int | None = None
    min_bits: int = 1
    hessian_aware: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.interval < 1:
            raise ConfigError(f"pruning interval must be >= 1, got {self.interval}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.gamma_target <= 1:
            raise ConfigError(f"gamma_target must lie in (0, 1], got {self.gamma_target}")
        if self.min_bits < 1:
            raise ConfigError(f"min_bits must be >= 1, got {self.min_bits}")


def resolve_deadline(cfg: ScheduleConfig, total_epochs: int) -> int:
    """Deadline for the forced final pass: last multiple of the interval
    strictly before 0.75 * total epochs (at least one interval)."""
    if cfg.deadline is not None:
        if cfg.deadline > total_epochs:
            raise ConfigError(
                f"deadline {cfg.deadline} exceeds total epochs {total_epochs}"
            )
        return cfg.deadline
    cutoff = int(np.ceil(0.75 * total_epochs)) - 1
    return max(cfg.interval, (cutoff // cfg.interval) * cfg.interval)


@dataclass
class BitScheme:
    """Per-layer precision assignment: (layer id, bits, weight count)."""

    entries: list[tuple[int, int, int]]

    def __post_init__(self):
        if not self.entries:
            raise InputError("bit scheme needs at least one layer")
        for _, bits, count in self.entries:
            if count <= 0:
                raise InputError(f"layer weight count must be positive, got {count}")
            if bits < 1:
                raise InputError(f"layer bits must be >= 1, got {bits}")

    @property
    def size_fraction(self) -> float:
        return size_fraction(self)

    @property
    def compression_ratio(self) -> float:
        return 1.0 / self.size_fraction


def size_fraction(scheme: BitScheme) -> float:
    """Weighted mean bits / 32: sum(bits * count) / (32 * sum(count))."""
    weighted = sum(bits * count for _, bits, count in scheme.entries)
    total = sum(count for _, _, count in scheme.entries)
    return weighted / (FULL_PRECISION_BITS * total)


def scheme_from_states(states: list[LayerQuantState]) -> BitScheme:
    return BitScheme([(i, s.bits, s.latent.size) for i, s in enumerate(states)])


@dataclass
class PruneEvent:
    """One logged precision drop: layer went old_bits -> new_bits."""

    epoch: int
    layer: int
    old_bits: int
    new_bits: int
    omega: float | None
    beta: float


@dataclass
class ScheduleState:
    phase: str = PHASE_PRUNING
    beta: list[float] = field(default_factory=list)
    events: list[PruneEvent] = field(default_factory=list)
    finetune_epoch: int | None = None

    def flip_to_finetune(self, epoch: int):
        if self.phase == PHASE_PRUNING:
            self.phase = PHASE_FINETUNE
            self.finetune_epoch = epoch


def lsb_nonzero_rate(state: LayerQuantState) -> float:
    """Fraction of weights whose LSB slice (width = prune speed) is nonzero.

    Layers that cannot be sliced at their current speed (bits <= speed or
    already at their floor) report 1.0, which keeps them behind the
    pruning gate without special-casing the sort.
    """
    if state.bits <= state.prune_speed or state.bits <= state.floor_bits:
        return 1.0
    codes = lsb_code(
        state.normalized(), state.bits, state.prune_speed, QuantizerKind.ROUND_CLAMP
    )
    return float(np.count_nonzero(codes)) / codes.size


def should_fire(
    epoch: int, cfg: ScheduleConfig, state: ScheduleState, scheme: BitScheme
) -> bool:
    """True iff a pruning event runs at the end of this (1-based) epoch."""
    return (
        epoch >= 1
        and epoch % cfg.interval == 0
        and state.phase == PHASE_PRUNING
        and scheme.size_fraction > cfg.gamma_target
    )


def pruning_event(
    state: ScheduleState,
    layers: list[LayerQuantState],
    records: list[SensitivityRecord] | None,
    cfg: ScheduleConfig,
    epoch: int,
    deadline: int | None = None,
) -> ScheduleState:
    """Run one pruning event over all quantized layers.

    Layers are visited in ascending nonzero-rate order (ties by index):
    those under the alpha gate drop prune_speed bits, stopping as soon as
    the size fraction reaches the target. From the deadline epoch onward
    the gate is ignored and pruning continues (floors still respected)
    until the target is met or nothing can be pruned. A 2-bit drop that
    would overshoot below the target, or would pierce a layer's floor in
    the forced pass, is downgraded to 1 bit. Afterwards prune speeds are
    reassigned from the sensitivity records for the next event, and the
    phase flips to finetune if the target was reached.
    """
    if state.phase != PHASE_PRUNING:
        raise StateError("pruning_event called in finetune phase")
    if records is not None and len(records) != len(layers):
        raise InputError(
            f"got {len(records)} sensitivity records for {len(layers)} layers"
        )
    if deadline is None:
        deadline = resolve_deadline(cfg, total_epochs=epoch)

    betas = [lsb_nonzero_rate(s) for s in layers]
    state.beta = list(betas)
    order = sorted(range(len(layers)), key=lambda i: (betas[i], i))

    def gamma() -> float:
        return scheme_from_states(layers).size_fraction

    def gamma_after(idx: int, drop: int) -> float:
        entries = [
            (i, s.bits - (drop if i == idx else 0), s.latent.size)
            for i, s in enumerate(layers)
        ]
        return size_fraction(BitScheme(entries))

    def attempt_prune(idx: int, forced: bool) -> bool:
        layer = layers[idx]
        floor = max(cfg.min_bits, layer.floor_bits)
        drop = layer.prune_speed
        if forced:
            drop = min(drop, layer.bits - floor)
            if drop < 1:
                return False
        elif layer.bits - drop < floor:
            return False
        if drop == 2 and gamma_after(idx, 2) < cfg.gamma_target:
            drop = 1
        old = layer.bits
        layer.bits = old - drop
        state.events.append(
            PruneEvent(
                epoch=epoch,
                layer=idx,
                old_bits=old,
                new_bits=layer.bits,
                omega=records[idx].omega if records is not None else None,
                beta=betas[idx],
            )
        )
        return True

    # Gated pass: visit in ascending beta, prune under the alpha gate,
    # stop as soon as the target size fraction is reached.
    for idx in order:
        if gamma() <= cfg.gamma_target:
            break
        if betas[idx] < cfg.alpha:
            attempt_prune(idx, forced=False)

    # Forced pass from the deadline onward: same order, gate dropped.
    if epoch >= deadline:
        progressed = True
        while gamma() > cfg.gamma_target and progressed:
            progressed = False
            for idx in order:
                if gamma() <= cfg.gamma_target:
                    break
                if attempt_prune(idx, forced=True):
                    progressed = True

    if records is not None:
        speeds = assign_prune_speed([r.omega for r in records])
        for layer, speed in zip(layers, speeds):
            layer.prune_speed = speed

    if gamma() <= cfg.gamma_target:
        state.flip_to_finetune(epoch)
    return state
