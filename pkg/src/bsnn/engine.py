"""BPTT training engine for feedforward binarized spiking networks.

The forward pass is layer-sequential: because connectivity is feedforward,
each layer can integrate all T time steps (a single weight multiply over the
stacked step axis, then an elementwise membrane loop) before its spikes feed
the next layer. The reverse pass mirrors this: the membrane recurrence carries
a factor ``beta`` per step, spike nodes use the clamped fast-sigmoid surrogate
evaluated at the recorded membrane, the reset path is gradient-detached, and
gradients reach the latent weights through the straight-through estimator.

Thresholds are strictly constant within a forward pass. The warm-up update
runs exactly once per training iteration, after the optimizer step; the
surrogate clamp never moves, so a frozen tape yields bit-identical gradients
no matter how far the thresholds have annealed since it was recorded.

Batches are processed in fixed-size chunks reduced in chunk order, which keeps
results byte-identical regardless of how many worker threads execute the
chunks.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .anneal import AnnealSchedule, anneal_step, check_update_bound
from .binarize import (
    LatentWeightMatrix,
    binarize_view,
    clip_latent,
    init_dense,
    read_weight_block,
    ste_backward,
    write_weight_block,
)
from .errors import ContractViolation, DataError, NumericError
from .neuron import LifLayer, SurrogateConfig, lif_step, soft_spike, surrogate_grad

WEIGHT_MODES = ("binary", "full")


# ---------------------------------------------------------------------------
# Network structure
# ---------------------------------------------------------------------------


@dataclass
class Layer:
    weights: LatentWeightMatrix
    lif: LifLayer
    schedule: AnnealSchedule
    surrogate: SurrogateConfig
    dropout: float = 0.0


class Network:
    """Ordered dense spiking layers plus the weight-precision mode."""

    def __init__(self, layers: list[Layer], weight_mode: str = "binary"):
        if weight_mode not in WEIGHT_MODES:
            raise ContractViolation(f"unknown weight mode {weight_mode!r}")
        if not layers:
            raise ContractViolation("a network needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.lif.n != layer.weights.rows:
                raise ContractViolation(
                    f"layer {i}: lif size {layer.lif.n} != weight fan-out {layer.weights.rows}"
                )
            if i > 0 and layer.weights.cols != layers[i - 1].weights.rows:
                raise ContractViolation(
                    f"layer {i}: fan-in {layer.weights.cols} != previous fan-out "
                    f"{layers[i - 1].weights.rows}"
                )
            if not (0.0 <= layer.dropout < 1.0):
                raise ContractViolation(f"layer {i}: dropout must lie in [0, 1)")
        self.layers = layers
        self.weight_mode = weight_mode
        self.sync_thresholds()

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def fan_in(self) -> int:
        return self.layers[0].weights.cols

    def sync_thresholds(self) -> None:
        for layer in self.layers:
            layer.lif.theta = layer.schedule.theta_gamma

    def parameters(self) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        for layer in self.layers:
            params.append(layer.weights.latent)
            if layer.weights.bias is not None:
                params.append(layer.weights.bias)
        return params


def build_network(arch: tuple[int, ...], *, weight_mode: str, rng: np.random.Generator,
                  betas: list[float], schedules: list[AnnealSchedule],
                  surrogate_k: float, dropouts: list[float] | None = None,
                  clip_enabled: bool = True, with_bias: bool = True) -> Network:
    """Assemble a dense network from layer sizes (first entry = input width)."""
    n_weight_layers = len(arch) - 1
    if n_weight_layers < 1:
        raise ContractViolation("arch must list the input size and at least one layer")
    if not (len(betas) == len(schedules) == n_weight_layers):
        raise ContractViolation("betas and schedules must match the layer count")
    if dropouts is None:
        dropouts = [0.0] * n_weight_layers
    layers = []
    for i in range(n_weight_layers):
        w = init_dense(arch[i + 1], arch[i], rng, clip_enabled=clip_enabled,
                       with_bias=with_bias)
        sched = schedules[i]
        layers.append(
            Layer(
                weights=w,
                lif=LifLayer(arch[i + 1], betas[i], sched.theta_gamma),
                schedule=sched,
                surrogate=SurrogateConfig(theta0=sched.theta0, k=surrogate_k),
                dropout=dropouts[i],
            )
        )
    return Network(layers, weight_mode=weight_mode)


# ---------------------------------------------------------------------------
# Inputs and the forward tape
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StaticInput:
    """A drive that is constant over time: ``values`` (batch, n) applied T times.

    Semantically identical to tiling the vector across steps, but lets the
    engine compute first-layer currents once instead of T times.
    """

    values: np.ndarray
    T: int

    def materialize(self) -> np.ndarray:
        """Equivalent (T, batch, n) array; for tests and small inputs."""
        return np.broadcast_to(self.values, (self.T,) + self.values.shape).copy()


def as_time_major(inputs) -> np.ndarray | StaticInput:
    """Normalize user input to (T, batch, n) float64, or pass StaticInput through.

    Accepts (n, T) for a single sample or (batch, n, T) for a batch, matching
    the encoder output convention.
    """
    if isinstance(inputs, StaticInput):
        values = np.asarray(inputs.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        return StaticInput(values=values, T=inputs.T)
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 2:  # (n, T) single sample
        return np.ascontiguousarray(x.T)[:, None, :]
    if x.ndim == 3:  # (batch, n, T)
        return np.ascontiguousarray(np.moveaxis(x, 2, 0))
    raise ContractViolation(f"input must be (n, T) or (batch, n, T), got shape {x.shape}")


@dataclass
class LayerTape:
    view: np.ndarray                     # weights as used in this pass
    inputs: np.ndarray | StaticInput     # what this layer saw (post-dropout upstream)
    membranes: np.ndarray                # (T, batch, n) pre-reset membrane
    spikes: np.ndarray                   # (T, batch, n)
    mask: np.ndarray | None              # inverted-dropout multiplier on outputs
    thetas: np.ndarray                   # (T,) threshold recorded at every step


@dataclass
class Tape:
    T: int
    batch: int
    smooth: bool
    train_mode: bool
    layers: list[LayerTape] = field(default_factory=list)


def forward(net: Network, inputs, train_mode: bool = False,
            dropout_rng: np.random.Generator | None = None,
            smooth: bool = False) -> tuple[Tape, np.ndarray, np.ndarray]:
    """Run T steps through every layer; returns (tape, output spikes, output membrane).

    ``smooth=True`` swaps the hard threshold for its differentiable relaxation
    (the smooth reference network used by gradient checks); everything else,
    including the detached reset, is unchanged.
    """
    x = as_time_major(inputs)
    if isinstance(x, StaticInput):
        T, batch, width = x.T, x.values.shape[0], x.values.shape[1]
    else:
        T, batch, width = x.shape
    if width != net.fan_in:
        raise ContractViolation(f"input width {width} != first-layer fan-in {net.fan_in}")
    if T < 1:
        raise ContractViolation("input must cover at least one time step")

    tape = Tape(T=T, batch=batch, smooth=smooth, train_mode=train_mode)
    last = net.n_layers - 1
    membranes = spikes = None
    for li, layer in enumerate(net.layers):
        if net.weight_mode == "binary":
            view = binarize_view(layer.weights)
        else:
            view = layer.weights.latent.copy()
        bias = layer.weights.bias
        n = layer.lif.n

        if isinstance(x, StaticInput):
            base = x.values @ view.T
            if bias is not None:
                base = base + bias
            currents = None
        else:
            flat = x.reshape(T * batch, -1) @ view.T
            currents = flat.reshape(T, batch, n)
            if bias is not None:
                currents += bias

        membranes = np.empty((T, batch, n), dtype=np.float64)
        spikes = np.empty((T, batch, n), dtype=np.float64)
        theta = layer.lif.theta
        if smooth:
            u = np.zeros((batch, n), dtype=np.float64)
            z = np.zeros((batch, n), dtype=np.float64)
            for t in range(T):
                cur = base if currents is None else currents[t]
                u = layer.lif.beta * u + cur - theta * z
                z = soft_spike(u, layer.surrogate)
                membranes[t] = u
                spikes[t] = z
        else:
            layer.lif.reset_state(batch)
            try:
                for t in range(T):
                    cur = base if currents is None else currents[t]
                    membranes[t], spikes[t] = lif_step(layer.lif, cur)
            except NumericError as exc:
                raise NumericError(f"layer {li}, step {t}: {exc}") from exc
        if not np.all(np.isfinite(membranes)):
            bad = int(np.argwhere(~np.isfinite(membranes).all(axis=(1, 2)))[0, 0])
            raise NumericError(f"layer {li}, step {bad}: non-finite membrane potential")

        mask = None
        out = spikes
        if train_mode and layer.dropout > 0.0 and li != last:
            if dropout_rng is None:
                raise ContractViolation("dropout requires an rng in train mode")
            keep = dropout_rng.random((batch, n)) >= layer.dropout
            mask = keep.astype(np.float64) / (1.0 - layer.dropout)
            out = spikes * mask

        tape.layers.append(
            LayerTape(view=view, inputs=x, membranes=membranes, spikes=spikes,
                      mask=mask, thetas=np.full(T, theta, dtype=np.float64))
        )
        x = out
    return tape, spikes, membranes


def backward(net: Network, tape: Tape,
             d_out_u: np.ndarray | None = None,
             d_out_z: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Reverse-mode pass over a recorded tape.

    ``d_out_u`` and/or ``d_out_z`` are the loss gradients w.r.t. the output
    layer's membrane trace and spike train, shaped (T, batch, n_out). Returns
    per-layer (latent-weight gradient, bias gradient) in layer order. Reads
    only the tape and the frozen surrogate clamp, never the live thresholds.
    """
    if len(tape.layers) != net.n_layers:
        raise ContractViolation(
            f"tape holds {len(tape.layers)} layers, network has {net.n_layers}"
        )
    T, batch = tape.T, tape.batch
    out_shape = (T, batch, net.layers[-1].lif.n)
    for name, g in (("d_out_u", d_out_u), ("d_out_z", d_out_z)):
        if g is not None and g.shape != out_shape:
            raise ContractViolation(f"{name} has shape {g.shape}, expected {out_shape}")

    grads: list[tuple[np.ndarray, np.ndarray | None]] = [None] * net.n_layers  # type: ignore
    g_z = d_out_z
    g_u = d_out_u
    for li in range(net.n_layers - 1, -1, -1):
        layer = net.layers[li]
        rec = tape.layers[li]
        if rec.membranes.shape != (T, batch, layer.lif.n):
            raise ContractViolation(f"tape entry {li} is incomplete or mis-shaped")
        beta = layer.lif.beta
        s = surrogate_grad(rec.membranes, layer.surrogate) if g_z is not None else None

        carries = np.empty_like(rec.membranes)
        carry = np.zeros((batch, layer.lif.n), dtype=np.float64)
        for t in range(T - 1, -1, -1):
            carry = beta * carry
            if g_z is not None:
                carry = carry + g_z[t] * s[t]
            if g_u is not None:
                carry = carry + g_u[t]
            carries[t] = carry

        flat = carries.reshape(T * batch, layer.lif.n)
        if isinstance(rec.inputs, StaticInput):
            gw_view = carries.sum(axis=0).T @ rec.inputs.values
        else:
            gw_view = flat.T @ rec.inputs.reshape(T * batch, -1)
        gb = flat.sum(axis=0) if layer.weights.bias is not None else None
        if net.weight_mode == "binary":
            gw = ste_backward(gw_view, layer.weights)
        else:
            gw = gw_view
        grads[li] = (gw, gb)

        if li > 0:
            gx = (flat @ rec.view).reshape(T, batch, -1)
            prev_mask = tape.layers[li - 1].mask
            g_z = gx * prev_mask if prev_mask is not None else gx
            g_u = None
    return grads


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray | None]]) -> list[np.ndarray]:
    """Flat list aligned with Network.parameters()."""
    flat: list[np.ndarray] = []
    for gw, gb in grads:
        flat.append(gw)
        if gb is not None:
            flat.append(gb)
    return flat


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def membrane_mse_loss(u_trace: np.ndarray, target_trace: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed squared error between a membrane trace and its target.

    Returns (loss, gradient w.r.t. the trace). The target broadcasts over any
    trailing batch/neuron axes of the trace.
    """
    u = np.asarray(u_trace, dtype=np.float64)
    y = np.asarray(target_trace, dtype=np.float64)
    if y.shape[0] != u.shape[0]:
        raise ContractViolation(
            f"target length {y.shape[0]} != trace length {u.shape[0]}"
        )
    y_b = y.reshape((y.shape[0],) + (1,) * (u.ndim - 1)) if y.ndim == 1 else y
    diff = y_b - u
    loss = float(np.sum(diff * diff))
    grad = np.broadcast_to(-2.0 * diff, u.shape).copy() if diff.shape != u.shape else -2.0 * diff
    return loss, grad


def spike_count_mse_loss(spike_trains: np.ndarray, correct_class: int,
                         T: int | None = None, *, rate_correct: float = 0.8,
                         rate_wrong: float = 0.2,
                         per_step: bool = False) -> tuple[float, np.ndarray]:
    """Squared error against target spike counts, one output train per class.

    ``spike_trains`` is (n_classes, T). The correct class targets
    ``rate_correct * T`` spikes and every other class ``rate_wrong * T``.
    ``per_step=True`` selects the literal per-time-step form, which compares
    each step against the target rate instead of comparing totals.
    """
    z = np.asarray(spike_trains, dtype=np.float64)
    if z.ndim != 2:
        raise ContractViolation(f"spike_trains must be (n_classes, T), got {z.shape}")
    n_classes, steps = z.shape
    if T is not None and T != steps:
        raise ContractViolation(f"declared T={T} but trains have {steps} steps")
    if not (0 <= correct_class < n_classes):
        raise ContractViolation(
            f"correct_class {correct_class} out of range for {n_classes} classes"
        )
    rates = np.full(n_classes, rate_wrong, dtype=np.float64)
    rates[correct_class] = rate_correct
    if per_step:
        diff = rates[:, None] - z
        return float(np.sum(diff * diff)), -2.0 * diff
    counts = z.sum(axis=1)
    diff = rates * steps - counts
    loss = float(np.sum(diff * diff))
    grad = np.repeat((-2.0 * diff)[:, None], steps, axis=1)
    return loss, grad


def _count_loss_batch(z_out: np.ndarray, labels: np.ndarray, *,
                      rate_correct: float = 0.8, rate_wrong: float = 0.2,
                      per_step: bool = False) -> tuple[float, np.ndarray]:
    """Batched count loss over (T, batch, n_classes); returns summed loss."""
    T, batch, n_classes = z_out.shape
    if labels.shape != (batch,):
        raise ContractViolation(f"labels shape {labels.shape} != ({batch},)")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractViolation("label out of range")
    rates = np.full((batch, n_classes), rate_wrong, dtype=np.float64)
    rates[np.arange(batch), labels] = rate_correct
    if per_step:
        diff = rates[None, :, :] - z_out
        return float(np.sum(diff * diff)), -2.0 * diff
    counts = z_out.sum(axis=0)
    diff = rates * T - counts
    loss = float(np.sum(diff * diff))
    grad = np.broadcast_to(-2.0 * diff, z_out.shape).copy()
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizers, learning-rate schedule, gradient clipping
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str                 # "sgd_momentum" | "adam"
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    slots: list | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sgd_momentum", "adam"):
            raise ContractViolation(f"unknown optimizer kind {self.kind!r}")


def _ensure_slots(state: OptimizerState, params: list[np.ndarray]) -> None:
    if state.slots is None:
        if state.kind == "adam":
            state.slots = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
        else:
            state.slots = [np.zeros_like(p) for p in params]
    elif len(state.slots) != len(params):
        raise ContractViolation("optimizer state does not match parameter list")


def sgd_momentum_step(state: OptimizerState, params: list[np.ndarray],
                      grads: list[np.ndarray]) -> None:
    """v <- momentum*v + g; p <- p - lr*v, in place."""
    _ensure_slots(state, params)
    state.step_count += 1
    for p, g, v in zip(params, grads, state.slots):
        v *= state.momentum
        v += g
        p -= state.lr * v


def adam_step(state: OptimizerState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> None:
    """Bias-corrected Adam update, in place."""
    _ensure_slots(state, params)
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, (m, v) in zip(params, grads, state.slots):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def optimizer_step(state: OptimizerState, params: list[np.ndarray],
                   grads: list[np.ndarray]) -> None:
    if state.kind == "adam":
        adam_step(state, params, grads)
    else:
        sgd_momentum_step(state, params, grads)


def cosine_lr(eta0: float, gamma: int, period: int) -> float:
    """Cosine-annealed rate with warm restarts every ``period`` iterations."""
    if period <= 0:
        raise ContractViolation(f"period must be positive, got {period}")
    return 0.5 * eta0 * (1.0 + math.cos(math.pi * (gamma % period) / period))


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> None:
    """Scale all gradients down so their global L2 norm is at most max_norm."""
    if max_norm <= 0.0:
        raise ContractViolation(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


@dataclass
class IterationRow:
    iteration: int
    epoch: int
    lr: float
    loss: float
    theta_gamma: tuple[float, ...]
    spike_rate: tuple[float, ...]
    dead_fraction: tuple[float, ...]
    bound_violations: int
    bound_violations_per_layer: tuple[int, ...]
    wall_ms: float = 0.0


def run_csv_columns(n_layers: int) -> list[str]:
    cols = ["iteration", "epoch", "lr", "loss"]
    cols += [f"theta_gamma_{i + 1}" for i in range(n_layers)]
    cols += [f"spike_rate_{i + 1}" for i in range(n_layers)]
    cols += [f"dead_fraction_{i + 1}" for i in range(n_layers)]
    cols += ["bound_violations", "wall_ms"]
    return cols


class RunRecord:
    """Per-iteration training log plus run-level metadata; the experiment output."""

    def __init__(self, n_layers: int, meta: dict | None = None):
        self.n_layers = n_layers
        self.rows: list[IterationRow] = []
        self.meta: dict = meta or {}
        self.traces: list[dict] = []

    def append(self, row: IterationRow) -> None:
        if len(row.theta_gamma) != self.n_layers:
            raise ContractViolation("row layer count does not match record")
        self.rows.append(row)

    def row_values(self, row: IterationRow) -> list:
        return (
            [row.iteration, row.epoch, row.lr, row.loss]
            + list(row.theta_gamma)
            + list(row.spike_rate)
            + list(row.dead_fraction)
            + [row.bound_violations, row.wall_ms]
        )


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------


class Trainer:
    """Owns one optimization run: network, optimizer, schedules, diagnostics.

    ``run_iteration`` performs, in exactly this order: forward, loss, backward,
    gradient clipping, optimizer step, latent clipping, threshold warm-up.
    The spike-clipping bound is evaluated against the previous iteration's
    recorded spike times, which is meaningful when the training input is fixed
    across iterations (the spike-timing task); for re-sampled batches it is
    disabled or marked approximate.
    """

    def __init__(self, net: Network, opt: OptimizerState, loss_kind: str, *,
                 eta0: float, lr_period: int = 0, grad_clip: bool = False,
                 max_grad_norm: float = 1.0, count_loss_literal: bool = False,
                 bound_mode: str = "off", dropout_seed: int = 0,
                 chunk_size: int = 0, workers: int = 1):
        if loss_kind not in ("membrane_mse", "spike_count"):
            raise ContractViolation(f"unknown loss kind {loss_kind!r}")
        if bound_mode not in ("off", "strict", "lenient"):
            raise ContractViolation(f"unknown bound mode {bound_mode!r}")
        self.net = net
        self.opt = opt
        self.loss_kind = loss_kind
        self.eta0 = eta0
        self.lr_period = lr_period
        self.grad_clip = grad_clip
        self.max_grad_norm = max_grad_norm
        self.count_loss_literal = count_loss_literal
        self.bound_mode = bound_mode
        self.chunk_size = chunk_size
        self.workers = max(1, workers)
        self.iteration = 0
        self._dropout_ss = np.random.SeedSequence(dropout_seed)
        self._prev_spike_masks: list[np.ndarray] | None = None
        self._prev_theta: list[float] | None = None
        self._prev_delta: list[float] | None = None
        net.sync_thresholds()

    # -- one training iteration ------------------------------------------

    def run_iteration(self, inputs, target, epoch: int = 0) -> tuple[IterationRow, dict]:
        """Train on one batch; returns the record row and auxiliary traces.

        ``target`` is a (T,) membrane target for membrane_mse, or an integer
        label vector for spike_count.
        """
        lr = cosine_lr(self.eta0, self.iteration, self.lr_period) if self.lr_period > 0 \
            else self.eta0
        self.opt.lr = lr

        x = as_time_major(inputs)
        batch = x.values.shape[0] if isinstance(x, StaticInput) else x.shape[1]
        T = x.T if isinstance(x, StaticInput) else x.shape[0]
        labels = None
        trace_target = None
        if self.loss_kind == "spike_count":
            labels = np.asarray(target)
            if labels.shape != (batch,):
                raise ContractViolation(f"labels shape {labels.shape} != ({batch},)")
        else:
            trace_target = np.asarray(target, dtype=np.float64)

        chunks = self._plan_chunks(batch)
        chunk_rngs = [np.random.default_rng(s) for s in self._dropout_ss.spawn(len(chunks))]
        need_bound = self.bound_mode != "off" and batch == 1

        if self.workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(
                    lambda args: self._chunk_pass(x, args[0], trace_target, labels,
                                                  args[1], need_bound),
                    zip(chunks, chunk_rngs),
                ))
        else:
            results = [self._chunk_pass(x, sl, trace_target, labels, rng, need_bound)
                       for sl, rng in zip(chunks, chunk_rngs)]

        # Fixed-order reduction over chunks.
        loss_sum = 0.0
        grads_acc: list[np.ndarray] | None = None
        spike_totals = [np.zeros(l.lif.n) for l in self.net.layers]
        for res in results:
            loss_sum += res["loss"]
            if grads_acc is None:
                grads_acc = res["grads"]
            else:
                for acc, g in zip(grads_acc, res["grads"]):
                    acc += g
            for tot, part in zip(spike_totals, res["spike_totals"]):
                tot += part
        loss = loss_sum / batch
        inv_b = 1.0 / batch
        for g in grads_acc:
            g *= inv_b

        if self.grad_clip:
            clip_gradients(grads_acc, self.max_grad_norm)
        optimizer_step(self.opt, self.net.parameters(), grads_acc)
        for layer in self.net.layers:
            clip_latent(layer.weights)

        bound_counts = self._bound_check(results[0] if need_bound else None)

        thetas_before = [l.schedule.theta_gamma for l in self.net.layers]
        for layer in self.net.layers:
            anneal_step(layer.schedule)
        deltas = [l.schedule.theta_gamma - before
                  for l, before in zip(self.net.layers, thetas_before)]
        self.net.sync_thresholds()
        if need_bound:
            self._remember_spike_events(results[0], thetas_before, deltas)
        else:
            self._prev_spike_masks = None

        n_t_b = T * batch
        row = IterationRow(
            iteration=self.iteration,
            epoch=epoch,
            lr=lr,
            loss=loss,
            theta_gamma=tuple(l.schedule.theta_gamma for l in self.net.layers),
            spike_rate=tuple(float(tot.sum()) / (l.lif.n * n_t_b)
                             for tot, l in zip(spike_totals, self.net.layers)),
            dead_fraction=tuple(float(np.count_nonzero(tot == 0)) / l.lif.n
                                for tot, l in zip(spike_totals, self.net.layers)),
            bound_violations=sum(bound_counts),
            bound_violations_per_layer=tuple(bound_counts),
        )
        aux = {
            "output_membrane": results[0]["out_membrane"],
            "output_spike_times": results[0]["out_spike_times"],
        }
        self.iteration += 1
        return row, aux

    # -- internals ---------------------------------------------------------

    def _plan_chunks(self, batch: int) -> list[slice]:
        size = self.chunk_size if self.chunk_size > 0 else batch
        return [slice(i, min(i + size, batch)) for i in range(0, batch, size)]

    def _slice_input(self, x, sl: slice):
        if isinstance(x, StaticInput):
            return StaticInput(values=x.values[sl], T=x.T)
        return x[:, sl, :]

    def _chunk_pass(self, x, sl: slice, trace_target, labels,
                    rng: np.random.Generator, need_bound: bool) -> dict:
        xc = self._slice_input(x, sl)
        tape, z_out, u_out = forward(self.net, xc, train_mode=True, dropout_rng=rng)
        if self.loss_kind == "membrane_mse":
            loss, d_u = membrane_mse_loss(u_out, trace_target)
            grads = backward(self.net, tape, d_out_u=d_u)
        else:
            loss, d_z = _count_loss_batch(z_out, labels[sl],
                                          per_step=self.count_loss_literal)
            grads = backward(self.net, tape, d_out_z=d_z)
        res = {
            "loss": loss,
            "grads": flatten_grads(grads),
            "spike_totals": [rec.spikes.sum(axis=(0, 1)) for rec in tape.layers],
            "out_membrane": u_out[:, 0, :].copy(),
            "out_spike_times": np.flatnonzero(z_out[:, 0, 0])
            if z_out.shape[2] == 1 else None,
        }
        if need_bound:
            res["membranes0"] = [rec.membranes[:, 0, :].copy() for rec in tape.layers]
            res["spikes0"] = [rec.spikes[:, 0, :] > 0.0 for rec in tape.layers]
        return res

    def _bound_check(self, res: dict | None) -> list[int]:
        counts = [0] * self.net.n_layers
        if res is None or self._prev_spike_masks is None:
            return counts
        for li in range(self.net.n_layers):
            mask = self._prev_spike_masks[li]
            if not mask.any():
                continue
            u_sel = res["membranes0"][li][mask]
            report = check_update_bound(
                self._prev_delta[li], u_sel, self._prev_theta[li],
                layer=li, iteration=self.iteration,
            )
            counts[li] = report.n_violated
        return counts

    def _remember_spike_events(self, res: dict, thetas_before: list[float],
                               deltas: list[float]) -> None:
        masks = []
        for li, spike_mask in enumerate(res["spikes0"]):
            mask = spike_mask.copy()
            if self.bound_mode == "lenient":
                # Only neurons at risk of dying: at most one spike this pass.
                few = spike_mask.sum(axis=0) <= 1
                mask &= few[None, :]
            masks.append(mask)
        self._prev_spike_masks = masks
        self._prev_theta = thetas_before
        self._prev_delta = deltas


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"BSNW"
_CKPT_VERSION = 1
_LAYER_HEAD = struct.Struct("<dddddQddd")


def save_checkpoint(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, net.n_layers))
        fh.write(struct.pack("<I", 0 if net.weight_mode == "binary" else 1))
        for layer in net.layers:
            s = layer.schedule
            fh.write(_LAYER_HEAD.pack(
                layer.lif.beta, s.theta0, s.theta_inf, s.alpha, s.theta_gamma,
                s.gamma, layer.surrogate.theta0, layer.surrogate.k, layer.dropout,
            ))
            write_weight_block(fh, layer.weights)


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataError(f"{path}: not a network checkpoint (bad magic)")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (mode_flag,) = struct.unpack("<I", fh.read(4))
        layers = []
        for _ in range(n_layers):
            head = fh.read(_LAYER_HEAD.size)
            if len(head) != _LAYER_HEAD.size:
                raise DataError(f"{path}: truncated layer header")
            beta, theta0, theta_inf, alpha, theta_gamma, gamma, s_theta0, s_k, dropout = \
                _LAYER_HEAD.unpack(head)
            weights = read_weight_block(fh)
            sched = AnnealSchedule(theta0=theta0, theta_inf=theta_inf, alpha=alpha,
                                   theta_gamma=theta_gamma, gamma=int(gamma))
            layers.append(Layer(
                weights=weights,
                lif=LifLayer(weights.rows, beta, theta_gamma),
                schedule=sched,
                surrogate=SurrogateConfig(theta0=s_theta0, k=s_k),
                dropout=dropout,
            ))
    return Network(layers, weight_mode="binary" if mode_flag == 0 else "full")
