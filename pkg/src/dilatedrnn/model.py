"""Multi-layer dilated recurrent networks.

Layer ``l`` at time ``t`` reads layer ``l-1``'s output at ``t`` and its own
state at ``t - s(l)``; states before the start of the sequence are zero.
Logits are produced at every timestep from the top layer (or from the fusion
head when the starting dilation exceeds one); a loss mask decides which
timesteps contribute.

Three forward paths compute the same function:

* :func:`forward` walks time one step at a time, exactly as defined.
* :func:`forward_interleaved` splits each layer's input into ``s`` phase
  subsequences and runs them side by side as one dilation-1 recurrence.
* :func:`fusion_forward` downsamples the input into ``M**l0`` phases, runs a
  stack with dilations divided by ``M**l0`` on each, re-interleaves and fuses.

All arrays crossing the public API are batch-major ``(batch, time, dim)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cells import Cell, CellKind, CellState
from .errors import ConfigurationError, ConsistencyError, DimensionError, FormatError
from .numeric import DTYPE, Parameter, Rng, init_weights, softmax_cross_entropy

CHECKPOINT_FORMAT = "dilatedrnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DilationSchedule:
    """Exponential dilations ``s(l) = base**(l - 1 + start_exponent)``."""

    num_layers: int
    base: int = 2
    start_exponent: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError("a schedule needs at least one layer")
        if self.base < 2:
            raise ConfigurationError("dilation base must be at least 2")
        if self.start_exponent < 0:
            raise ConfigurationError("start exponent must be non-negative")

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(self.base ** (l + self.start_exponent) for l in range(self.num_layers))

    @property
    def starting_dilation(self) -> int:
        return self.base**self.start_exponent


class FusionHead:
    """Causal 1-by-``window`` linear convolution over top-layer outputs.

    ``weights`` stacks one ``hidden x hidden`` block per lag: rows
    ``k*H:(k+1)*H`` act on the output ``k`` steps back. No bias and no
    nonlinearity; the readout that follows carries the bias.
    """

    def __init__(self, window: int, hidden_dim: int, rng: Rng | None = None, init: str = "standard_normal"):
        if window < 2:
            raise ConfigurationError("fusion window must be at least 2")
        self.window = int(window)
        self.hidden_dim = int(hidden_dim)
        shape = (self.window * self.hidden_dim, self.hidden_dim)
        value = init_weights(shape, rng, init) if rng is not None else np.zeros(shape)
        self.weights = Parameter("fusion.weights", value)

    def lagged(self, top: np.ndarray) -> np.ndarray:
        T, B, H = top.shape
        z = np.zeros((T, B, self.window * H), dtype=DTYPE)
        for k in range(min(self.window, T)):
            z[k:, :, k * H : (k + 1) * H] = top[: T - k]
        return z


class DilatedRnnModel:
    """Stack of recurrent layers plus readout, and a fusion head when ``l0 > 0``.

    ``dilations[l]`` is the recurrent offset of layer ``l``. Regular-skip
    baselines keep offset 1 and add a second recurrent input from
    ``skip_length`` steps back.
    """

    def __init__(
        self,
        cell_kind: CellKind | str,
        input_dim: int,
        hidden_dim: int,
        num_classes: int,
        dilations: Sequence[int],
        rng: Rng | None = None,
        *,
        schedule: DilationSchedule | None = None,
        skip_length: int | None = None,
        architecture: str = "dilated",
        forget_bias: float = 1.0,
        init: str = "standard_normal",
    ):
        self.cell_kind = CellKind(cell_kind)
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.num_classes = int(num_classes)
        self.dilations = tuple(int(d) for d in dilations)
        self.schedule = schedule
        self.skip_length = None if skip_length is None else int(skip_length)
        self.architecture = architecture
        self.forget_bias = float(forget_bias)
        self.init = init
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigurationError("every layer needs a dilation >= 1")
        if num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.skip_length is not None and self.skip_length < 1:
            raise ConfigurationError("skip length must be positive")
        if schedule is not None and schedule.dilations != self.dilations:
            raise ConfigurationError("dilations disagree with the schedule")

        self.layers: list[Cell] = []
        for l, _ in enumerate(self.dilations):
            self.layers.append(
                Cell(
                    self.cell_kind,
                    self.input_dim if l == 0 else self.hidden_dim,
                    self.hidden_dim,
                    rng,
                    skip=self.skip_length is not None,
                    forget_bias=forget_bias,
                    name=f"layer{l + 1}",
                    init=init,
                )
            )
        shape = (self.hidden_dim, self.num_classes)
        readout = init_weights(shape, rng, init) if rng is not None else np.zeros(shape)
        self.readout_weights = Parameter("readout.weights", readout)
        self.readout_bias = Parameter("readout.bias", np.zeros((1, self.num_classes)))
        self.fusion: Optional[FusionHead] = None
        if schedule is not None and schedule.start_exponent > 0:
            self.fusion = FusionHead(schedule.starting_dilation, self.hidden_dim, rng, init)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Parameter]:
        params = [p for cell in self.layers for p in cell.parameters()]
        params += [self.readout_weights, self.readout_bias]
        if self.fusion is not None:
            params.append(self.fusion.weights)
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def describe(self) -> dict:
        return {
            "architecture": self.architecture,
            "cell": self.cell_kind.value,
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "num_classes": self.num_classes,
            "dilations": list(self.dilations),
            "skip_length": self.skip_length,
            "schedule": None
            if self.schedule is None
            else {
                "num_layers": self.schedule.num_layers,
                "base": self.schedule.base,
                "start_exponent": self.schedule.start_exponent,
            },
            "forget_bias": self.forget_bias,
            "init": self.init,
        }


def build_model(
    kind: CellKind | str,
    schedule: DilationSchedule,
    input_dim: int,
    hidden_dim: int,
    num_classes: int,
    rng: Rng,
    forget_bias: float = 1.0,
    init: str = "standard_normal",
) -> DilatedRnnModel:
    """Dilated stack with standard-normal weights (by default) and zero biases."""
    if not isinstance(schedule, DilationSchedule):
        raise ConfigurationError("schedule must be a DilationSchedule")
    return DilatedRnnModel(
        kind,
        input_dim,
        hidden_dim,
        num_classes,
        schedule.dilations,
        rng,
        schedule=schedule,
        forget_bias=forget_bias,
        init=init,
    )


def build_baseline(
    kind: str,
    cell: CellKind | str,
    *,
    input_dim: int,
    hidden_dim: int,
    num_classes: int,
    rng: Rng,
    num_layers: int = 1,
    skip_length: int | None = None,
    forget_bias: float = 1.0,
    init: str = "standard_normal",
) -> DilatedRnnModel:
    """``single``, ``stacked`` (dilation 1 throughout) or ``regular_skip``."""
    if kind == "single":
        if num_layers != 1:
            raise ConfigurationError("a single-layer baseline has exactly one layer")
        skip_length = None
    elif kind == "stacked":
        skip_length = None
    elif kind == "regular_skip":
        if skip_length is None:
            raise ConfigurationError("regular_skip needs a skip length")
    else:
        raise ConfigurationError(f"unknown baseline {kind!r}")
    if num_layers < 1:
        raise ConfigurationError("need at least one layer")
    return DilatedRnnModel(
        cell,
        input_dim,
        hidden_dim,
        num_classes,
        [1] * num_layers,
        rng,
        skip_length=skip_length,
        architecture=kind,
        forget_bias=forget_bias,
        init=init,
    )


def model_param_count(model: DilatedRnnModel) -> int:
    return model.param_count()


# -- layer recurrences ------------------------------------------------------


@dataclass
class LayerRun:
    """Caches of one layer over one (sub)sequence."""

    mode: str
    dilation: int
    skip: Optional[int]
    caches: list
    length: int
    batch: int


def _run_sequential(cell: Cell, xs: np.ndarray, dilation: int, skip: int | None):
    T, B, _ = xs.shape
    zero = cell.zero_state(B)
    states: list[CellState] = []
    caches = []
    for t in range(T):
        if skip is None:
            prev = states[t - dilation] if t >= dilation else zero
            state, cache = cell.forward(xs[t], prev)
        else:
            prev = states[t - 1] if t >= 1 else zero
            skipped = states[t - skip] if t >= skip else zero
            state, cache = cell.forward(xs[t], prev, skipped)
        states.append(state)
        caches.append(cache)
    out = np.stack([s.hidden for s in states]) if T else np.zeros((0, B, cell.hidden_dim))
    return LayerRun("sequential", dilation, skip, caches, T, B), out


def _backward_sequential(cell: Cell, run: LayerRun, dout: np.ndarray) -> np.ndarray:
    T, B = run.length, run.batch
    dh = np.array(dout, dtype=DTYPE, copy=True)
    dc = np.zeros_like(dh) if cell.kind is CellKind.LSTM else None
    dxs = np.empty((T, B, cell.input_dim), dtype=DTYPE)
    for t in reversed(range(T)):
        g = cell.backward(run.caches[t], dh[t], None if dc is None else dc[t])
        dxs[t] = g.dx
        back = t - (1 if run.skip is not None else run.dilation)
        if back >= 0:
            dh[back] += g.dprev.hidden
            if dc is not None:
                dc[back] += g.dprev.memory
        if run.skip is not None and t >= run.skip:
            dh[t - run.skip] += g.dskipped.hidden
    return dxs


def _run_interleaved(cell: Cell, xs: np.ndarray, dilation: int):
    """Dilation-``s`` recurrence as ``s`` parallel dilation-1 recurrences.

    Phase ``p`` is the subsequence ``xs[p::s]``. Step ``k`` of every phase
    is the slab ``xs[k*s : k*s + n]``, which stacks the ``n`` phases still
    running along the batch axis (phases are ordered by decreasing length,
    so the survivors are always a prefix). Writing the slab back to its
    time positions re-interleaves the outputs.
    """
    T, B, D = xs.shape
    H = cell.hidden_dim
    out = np.empty((T, B, H), dtype=DTYPE)
    caches = []
    state: CellState | None = None
    for start in range(0, T, dilation):
        n = min(dilation, T - start)
        x = xs[start : start + n].reshape(n * B, D)
        if state is None:
            prev = cell.zero_state(n * B)
        else:
            mem = None if state.memory is None else state.memory[: n * B]
            prev = CellState(state.hidden[: n * B], mem)
        state, cache = cell.forward(x, prev)
        out[start : start + n] = state.hidden.reshape(n, B, H)
        caches.append(cache)
    return LayerRun("interleaved", dilation, None, caches, T, B), out


def _backward_interleaved(cell: Cell, run: LayerRun, dout: np.ndarray) -> np.ndarray:
    T, B, s = run.length, run.batch, run.dilation
    H, D = cell.hidden_dim, cell.input_dim
    dxs = np.empty((T, B, D), dtype=DTYPE)
    carry_h = carry_c = None
    for k in reversed(range(len(run.caches))):
        start = k * s
        n = min(s, T - start)
        dh = dout[start : start + n].reshape(n * B, H).copy()
        dc = None
        if cell.kind is CellKind.LSTM:
            dc = np.zeros_like(dh)
        if carry_h is not None:
            rows = carry_h.shape[0]
            dh[:rows] += carry_h
            if dc is not None:
                dc[:rows] += carry_c
        g = cell.backward(run.caches[k], dh, dc)
        dxs[start : start + n] = g.dx.reshape(n, B, D)
        carry_h, carry_c = g.dprev.hidden, g.dprev.memory
    return dxs


def _stack_forward(model: DilatedRnnModel, xs: np.ndarray, mode: str, dilations):
    runs = []
    h = xs
    for cell, dilation in zip(model.layers, dilations):
        if mode == "interleaved" and model.skip_length is None:
            run, h = _run_interleaved(cell, h, dilation)
        else:
            run, h = _run_sequential(cell, h, dilation, model.skip_length)
        runs.append(run)
    return runs, h


def _stack_backward(model: DilatedRnnModel, runs, dtop: np.ndarray) -> np.ndarray:
    d = dtop
    for cell, run in zip(reversed(model.layers), reversed(runs)):
        if run.mode == "interleaved":
            d = _backward_interleaved(cell, run, d)
        else:
            d = _backward_sequential(cell, run, d)
    return d


def split_phases(xs: np.ndarray, period: int) -> list[np.ndarray]:
    """Split a time-major sequence into ``period`` interleaved subsequences."""
    return [xs[p::period] for p in range(min(period, len(xs)))]


def merge_phases(parts: Sequence[np.ndarray], length: int) -> np.ndarray:
    """Inverse of :func:`split_phases`."""
    period = len(parts)
    out = np.empty((length,) + parts[0].shape[1:], dtype=parts[0].dtype)
    for p, part in enumerate(parts):
        out[p::period] = part
    return out


# -- full-sequence passes ---------------------------------------------------


@dataclass
class SequenceActivations:
    """Everything :func:`backward` needs from one forward call."""

    mode: str
    stacks: list  # (time indices, layer runs) per independently-run stack
    top: np.ndarray  # (T, B, H) top-layer outputs
    lagged: Optional[np.ndarray]  # (T, B, W*H) fusion-head inputs
    features: np.ndarray  # (T, B, H) readout inputs
    logits: np.ndarray  # (B, T, C)
    model_id: int
    versions: tuple = field(default=())

    @property
    def length(self) -> int:
        return self.top.shape[0]


def _time_major(model: DilatedRnnModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=DTYPE)
    if x.ndim != 3 or x.shape[2] != model.input_dim:
        raise DimensionError(f"inputs {x.shape}, expected (batch, T, {model.input_dim})")
    if x.shape[1] < 1:
        raise DimensionError("sequences need at least one timestep")
    return np.ascontiguousarray(x.transpose(1, 0, 2))


def _head(model: DilatedRnnModel, mode, stacks, top) -> SequenceActivations:
    lagged = None
    features = top
    if model.fusion is not None:
        lagged = model.fusion.lagged(top)
        features = lagged @ model.fusion.weights.value
    logits = features @ model.readout_weights.value + model.readout_bias.value
    return SequenceActivations(
        mode,
        stacks,
        top,
        lagged,
        features,
        np.ascontiguousarray(logits.transpose(1, 0, 2)),
        id(model),
        tuple(p.version for p in model.parameters()),
    )


def forward(model: DilatedRnnModel, inputs) -> SequenceActivations:
    """Step-by-step evaluation of the network on ``(batch, T, input_dim)``."""
    xs = _time_major(model, inputs)
    runs, top = _stack_forward(model, xs, "sequential", model.dilations)
    return _head(model, "sequential", [(slice(None), runs)], top)


def forward_interleaved(model: DilatedRnnModel, inputs) -> SequenceActivations:
    """Same function as :func:`forward`, each layer run as parallel phases."""
    xs = _time_major(model, inputs)
    runs, top = _stack_forward(model, xs, "interleaved", model.dilations)
    return _head(model, "interleaved", [(slice(None), runs)], top)


def fusion_forward(model: DilatedRnnModel, inputs) -> SequenceActivations:
    """Run ``M**l0`` downsampled phases through a shared stack, then fuse."""
    if model.fusion is None:
        raise ConfigurationError("fusion_forward needs a starting dilation above one")
    xs = _time_major(model, inputs)
    window = model.fusion.window
    relative = [d // window for d in model.dilations]
    T, B, _ = xs.shape
    top = np.empty((T, B, model.hidden_dim), dtype=DTYPE)
    stacks = []
    for p, part in enumerate(split_phases(xs, window)):
        runs, h = _stack_forward(model, part, "sequential", relative)
        top[p::window] = h
        stacks.append((slice(p, None, window), runs))
    return _head(model, "phased", stacks, top)


def backward(model: DilatedRnnModel, acts: SequenceActivations, dlogits) -> None:
    """Accumulate the gradient of the loss into every ``Parameter.grad``.

    ``dlogits`` has the shape of ``acts.logits``; zero rows mark timesteps
    outside the loss mask.
    """
    if acts.model_id != id(model) or acts.versions != tuple(p.version for p in model.parameters()):
        raise ConsistencyError("activations are stale: parameters changed since the forward pass")
    dl = np.asarray(dlogits, dtype=DTYPE)
    if dl.shape != acts.logits.shape:
        raise DimensionError(f"dlogits {dl.shape} vs logits {acts.logits.shape}")
    dl = dl.transpose(1, 0, 2)
    T, B, C = dl.shape
    H = model.hidden_dim
    flat = dl.reshape(T * B, C)
    model.readout_weights.grad += acts.features.reshape(T * B, H).T @ flat
    model.readout_bias.grad += flat.sum(axis=0, keepdims=True)
    dfeat = dl @ model.readout_weights.value.T
    if model.fusion is not None:
        W = model.fusion.window
        model.fusion.weights.grad += acts.lagged.reshape(T * B, W * H).T @ dfeat.reshape(T * B, H)
        dlag = dfeat @ model.fusion.weights.value.T
        dtop = np.zeros_like(acts.top)
        for k in range(min(W, T)):
            dtop[: T - k] += dlag[k:, :, k * H : (k + 1) * H]
    else:
        dtop = dfeat
    for index, runs in acts.stacks:
        _stack_backward(model, runs, dtop[index])


def masked_loss(logits, targets, mask) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the masked ``(example, timestep)`` pairs."""
    logits = np.asarray(logits)
    mask = np.asarray(mask, dtype=bool)
    targets = np.asarray(targets)
    if mask.shape != logits.shape[:2] or targets.shape != mask.shape:
        raise DimensionError("logits, targets and mask disagree in (batch, T)")
    loss, d = softmax_cross_entropy(logits[mask], targets[mask])
    dlogits = np.zeros_like(logits)
    dlogits[mask] = d
    return loss, dlogits


def masked_accuracy(logits, targets, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    pred = np.asarray(logits).argmax(axis=-1)
    return float((pred[mask] == np.asarray(targets)[mask]).mean())


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(model: DilatedRnnModel, path, extra: dict | None = None) -> Path:
    """Write an ``.npz`` container: a JSON ``meta`` record plus one array per parameter.

    Arrays are stored in :meth:`DilatedRnnModel.parameters` order under
    ``param_000``, ``param_001``, ... so reloading is bit-exact.
    """
    path = Path(path)
    params = model.parameters()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.describe(),
        "parameters": [{"name": p.name, "shape": list(p.value.shape)} for p in params],
        "extra": extra or {},
    }
    arrays = {f"param_{k:03d}": p.value for k, p in enumerate(params)}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[DilatedRnnModel, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            arrays = {k: data[k] for k in data.files if k.startswith("param_")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    desc = meta["model"]
    schedule = None
    if desc["schedule"] is not None:
        schedule = DilationSchedule(**desc["schedule"])
    model = DilatedRnnModel(
        desc["cell"],
        desc["input_dim"],
        desc["hidden_dim"],
        desc["num_classes"],
        desc["dilations"],
        None,
        schedule=schedule,
        skip_length=desc["skip_length"],
        architecture=desc["architecture"],
        forget_bias=desc["forget_bias"],
        init=desc.get("init", "standard_normal"),
    )
    params = model.parameters()
    if len(params) != len(meta["parameters"]) or len(arrays) != len(params):
        raise FormatError(f"{path}: parameter count mismatch")
    for k, (p, rec) in enumerate(zip(params, meta["parameters"])):
        value = arrays[f"param_{k:03d}"]
        if rec["name"] != p.name or tuple(rec["shape"]) != p.value.shape or value.shape != p.value.shape:
            raise FormatError(f"{path}: parameter {k} is {rec['name']} {rec['shape']}, expected {p.name}")
        p.value[...] = value
    return model, meta
