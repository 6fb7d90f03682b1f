"""Training engine: SGD with momentum, warmup + cosine learning rate,
LSB-sparsity regularization, and epoch-boundary pruning events.

One run owns all randomness through keyed RNG streams of a single seed,
so repeating a config reproduces weights, batch order, and Hessian
probes bit for bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetHandle
from .errors import ConfigError, DivergenceError, InputError
from .model import Model
from .numerics import (
    STREAM_HESSIAN_BATCH,
    STREAM_HUTCHINSON_BASE,
    STREAM_SHUFFLE,
    RngStream,
    cross_entropy_with_grad,
)
from .quantize import quantized_forward
from .regularize import RegularizerConfig, lsb_l1, lsb_l1_grad
from .schedule import (
    PHASE_FINETUNE,
    PHASE_PRUNING,
    BitScheme,
    PruneEvent,
    ScheduleConfig,
    ScheduleState,
    lsb_nonzero_rate,
    pruning_event,
    resolve_deadline,
    scheme_from_states,
    should_fire,
)
from .sensitivity import SensitivityRecord, hutchinson_trace, omega


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 128
    lr: float = 0.05
    warmup_epochs: int = 0
    momentum: float = 0.9
    seed: int = 0
    a_bits: int | None = None
    act_clip: float = 1.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    hessian_samples: int = 8
    hessian_batch: int = 512
    hessian_eps: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(
                f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}"
            )
        if self.a_bits is not None and not 1 <= self.a_bits <= 8:
            raise ConfigError(f"a_bits must lie in [1, 8], got {self.a_bits}")
        if self.act_clip <= 0:
            raise ConfigError(f"act_clip must be positive, got {self.act_clip}")
        if self.hessian_samples < 1:
            raise ConfigError(f"hessian_samples must be >= 1, got {self.hessian_samples}")
        if self.hessian_batch < 1:
            raise ConfigError(f"hessian_batch must be >= 1, got {self.hessian_batch}")
        if self.hessian_eps <= 0:
            raise ConfigError(f"hessian_eps must be positive, got {self.hessian_eps}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based epoch: linear warmup to cfg.lr over
    warmup_epochs, then cosine annealing to 0 at the final epoch."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise InputError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.lr * (epoch + 1) / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    t = epoch - cfg.warmup_epochs
    return cfg.lr * 0.5 * (1.0 + float(np.cos(np.pi * t / span)))


class SgdMomentum:
    """Classic momentum: v = mu*v + g; w -= lr*v."""

    def __init__(self, momentum: float):
        self.momentum = momentum
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params: list[tuple[np.ndarray, np.ndarray]], lr: float):
        for i, (w, g) in enumerate(params):
            v = self._velocity.get(i)
            if v is None:
                v = np.zeros_like(w)
                self._velocity[i] = v
            v *= self.momentum
            v += g
            w -= lr * v


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    reg_loss: float
    val_acc: float
    gamma: float
    bits: tuple[int, ...]


@dataclass
class EventSnapshot:
    """State captured around one pruning event."""

    epoch: int
    beta: list[float]
    records: list[SensitivityRecord] | None
    bits_before: list[int]
    bits_after: list[int]
    speeds_before: list[int]
    speeds_after: list[int]


@dataclass
class TrainResult:
    model: Model
    scheme: BitScheme
    metrics: list[EpochMetrics]
    events: list[PruneEvent]
    snapshots: list[EventSnapshot]
    initial_beta: list[float]
    schedule_state: ScheduleState
    deadline: int
    final_val_acc: float
    train_seconds: float
    event_seconds: float


def evaluate(model: Model, data: DatasetHandle, a_bits: int | None = None,
             act_clip: float = 1.0, batch_size: int = 4096) -> float:
    """Top-1 accuracy under the current quantized forward path."""
    n = data.images.shape[0]
    correct = 0
    for start in range(0, n, batch_size):
        xb = data.images[start:start + batch_size]
        logits = model.forward(xb, a_bits, act_clip)
        pred = np.argmax(logits, axis=1)
        correct += int(np.sum(pred == data.labels[start:start + batch_size]))
    return correct / n


def mean_loss(model: Model, data: DatasetHandle, a_bits: int | None = None,
              act_clip: float = 1.0, batch_size: int = 4096) -> float:
    n = data.images.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        xb = data.images[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        loss, _ = cross_entropy_with_grad(model.forward(xb, a_bits, act_clip), yb)
        total += loss * xb.shape[0]
    return total / n


def layer_task_gradient(model: Model, layer_ordinal: int, x: np.ndarray,
                        y: np.ndarray, weights: np.ndarray,
                        a_bits: int | None, act_clip: float) -> np.ndarray:
    """Gradient of the batch task loss with respect to one layer's
    effective weights, everything else held at its current forward path.
    No straight-through mask: the probed weights enter the network as-is."""
    logits, cache = model.forward(
        x, a_bits, act_clip, with_cache=True,
        weight_override={layer_ordinal: weights},
    )
    _, dlogits = cross_entropy_with_grad(logits, y)
    dweights, _ = model.backward(cache, dlogits, ste=False)
    return dweights[layer_ordinal]


def sensitivity_records(model: Model, x: np.ndarray, y: np.ndarray,
                        cfg: TrainConfig, event_index: int) -> list[SensitivityRecord]:
    """Hutchinson curvature traces and quantization gaps for every
    quantized layer, probed at the current quantized weights. Probe RNG
    streams are keyed by (event index, layer ordinal) so events are
    independent and reproducible."""
    records = []
    quantized_ordinals = [
        i for i, l in enumerate(model.parametric_layers()) if l.qstate is not None
    ]
    for slot, ordinal in enumerate(quantized_ordinals):
        layer = model.parametric_layers()[ordinal]
        q = layer.qstate
        w_q = quantized_forward(q)

        def grad_fn(w, _ordinal=ordinal):
            return layer_task_gradient(model, _ordinal, x, y, w, cfg.a_bits, cfg.act_clip)

        rng = RngStream(
            cfg.seed, STREAM_HUTCHINSON_BASE + (event_index << 16) + slot
        )
        trace = hutchinson_trace(grad_fn, w_q, cfg.hessian_samples, rng, cfg.hessian_eps)
        gap_sq = float(np.sum((w_q - q.latent) ** 2))
        records.append(
            SensitivityRecord(
                layer=slot, trace=trace, gap_sq=gap_sq,
                omega=omega(trace, q.latent, w_q),
            )
        )
    return records


def train_run(model: Model, train_data: DatasetHandle, val_data: DatasetHandle,
              cfg: TrainConfig) -> TrainResult:
    """Full training loop. Pruning events fire at epoch boundaries that
    are multiples of the interval while the size fraction sits above the
    target; afterwards the run finetunes with the regularizer off and
    bits frozen."""
    states = model.quant_states()
    if model.spec.quantized and not states:
        raise ConfigError("quantized training needs at least one quantized layer")

    sched = cfg.schedule
    reg = RegularizerConfig(lam=sched.lam, active=model.spec.quantized)
    sched_state = ScheduleState()
    deadline = resolve_deadline(sched, cfg.epochs)
    initial_beta = [lsb_nonzero_rate(s) for s in states]

    if states and scheme_from_states(states).size_fraction <= sched.gamma_target:
        sched_state.flip_to_finetune(epoch=0)
        reg.active = False

    opt = SgdMomentum(cfg.momentum)
    shuffle_rng = RngStream(cfg.seed, STREAM_SHUFFLE)
    hess_rng = RngStream(cfg.seed, STREAM_HESSIAN_BATCH)
    n_train = train_data.images.shape[0]
    hb = min(cfg.hessian_batch, n_train)
    hess_idx = hess_rng.permutation(n_train)[:hb]

    metrics: list[EpochMetrics] = []
    snapshots: list[EventSnapshot] = []
    event_seconds = 0.0
    t0 = time.perf_counter()

    for epoch0 in range(cfg.epochs):
        epoch = epoch0 + 1
        lr = lr_at(epoch0, cfg)
        perm = shuffle_rng.permutation(n_train)
        loss_sum = 0.0
        reg_sum = 0.0
        n_batches = 0

        for start in range(0, n_train, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = train_data.images[idx]
            yb = train_data.labels[idx]
            logits, cache = model.forward(xb, cfg.a_bits, cfg.act_clip, with_cache=True)
            loss, dlogits = cross_entropy_with_grad(logits, yb)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}, batch {n_batches}"
                )
            dweights, dbiases = model.backward(cache, dlogits)

            if reg.active and reg.lam > 0:
                reg_sum += lsb_l1(states)
                for i, layer in enumerate(model.parametric_layers()):
                    if layer.qstate is not None:
                        dweights[i] = dweights[i] + reg.lam * lsb_l1_grad(layer.qstate)

            step_params = []
            for i, layer in enumerate(model.parametric_layers()):
                step_params.append((layer.weights, dweights[i]))
                step_params.append((layer.bias, dbiases[i]))
            opt.step(step_params, lr)
            loss_sum += loss
            n_batches += 1

        val_acc = evaluate(model, val_data, cfg.a_bits, cfg.act_clip)
        gamma = scheme_from_states(states).size_fraction if states else 1.0
        metrics.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / n_batches,
                reg_loss=reg_sum / n_batches,
                val_acc=val_acc,
                gamma=gamma,
                bits=tuple(s.bits for s in states),
            )
        )

        if states and should_fire(epoch, sched, sched_state, scheme_from_states(states)):
            te = time.perf_counter()
            records = None
            if sched.hessian_aware:
                records = sensitivity_records(
                    model,
                    train_data.images[hess_idx],
                    train_data.labels[hess_idx],
                    cfg,
                    event_index=len(snapshots),
                )
            bits_before = [s.bits for s in states]
            speeds_before = [s.prune_speed for s in states]
            pruning_event(sched_state, states, records, sched, epoch, deadline)
            snapshots.append(
                EventSnapshot(
                    epoch=epoch,
                    beta=list(sched_state.beta),
                    records=records,
                    bits_before=bits_before,
                    bits_after=[s.bits for s in states],
                    speeds_before=speeds_before,
                    speeds_after=[s.prune_speed for s in states],
                )
            )
            event_seconds += time.perf_counter() - te
        elif (
            states
            and sched_state.phase == PHASE_PRUNING
            and epoch % sched.interval == 0
            and scheme_from_states(states).size_fraction <= sched.gamma_target
        ):
            sched_state.flip_to_finetune(epoch)

        if sched_state.phase == PHASE_FINETUNE:
            reg.active = False

    train_seconds = time.perf_counter() - t0
    scheme = scheme_from_states(states) if states else BitScheme(
        [(i, 32, l.weights.size) for i, l in enumerate(model.parametric_layers())]
    )
    return TrainResult(
        model=model,
        scheme=scheme,
        metrics=metrics,
        events=list(sched_state.events),
        snapshots=snapshots,
        initial_beta=initial_beta,
        schedule_state=sched_state,
        deadline=deadline,
        final_val_acc=metrics[-1].val_acc,
        train_seconds=train_seconds,
        event_seconds=event_seconds,
    )


def param_accounting(weight_counts: list[int], split_bits: int) -> tuple[int, int, float]:
    """Storage comparison: a mixed-precision model keeps one parameter
    per weight, a bit-split scheme keeps one per weight per bit plane.
    Returns (base count, split count, ratio = split_bits)."""
    if not weight_counts:
        raise InputError("weight_counts must be non-empty")
    if any(c < 1 for c in weight_counts):
        raise InputError(f"weight counts must be positive, got {weight_counts}")
    if split_bits < 1:
        raise InputError(f"split_bits must be >= 1, got {split_bits}")
    base = int(sum(weight_counts))
    split = split_bits * base
    return base, split, split / base
