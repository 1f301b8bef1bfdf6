"""
HOLD Score Network Module
=========================
Fully connected score approximator S_theta(x, t) with hand-written
reverse-mode gradients (numpy only, float64 throughout).

Architecture: input [q, p, s, enc(t)] -> n_hidden SiLU layers of
hidden_width -> linear output of width d (the s-block score).

Also defines the score-model interface shared by the network, the zero
model and the analytic Gaussian-data score, and the binary checkpoint
format used by the trainer.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Protocol, Tuple, Union

import numpy as np
from scipy.special import expit

from modules.errors import CheckpointError
from modules.hold_config import NetSpec

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HOLDCKPT"
CHECKPOINT_VERSION = 1


class ScoreModel(Protocol):
    """Anything that predicts the s-block score of a (n, 3, d) phase batch."""

    d: int

    def score(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        ...

    def score_vjp(self, x: np.ndarray, t: np.ndarray, v: np.ndarray) -> np.ndarray:
        ...


# =============================================================================
# PARAMETER LAYOUT
# =============================================================================
@dataclass(frozen=True)
class LayerOffsets:
    w_start: int
    b_start: int
    fan_in: int
    fan_out: int

    @property
    def end(self) -> int:
        return self.b_start + self.fan_out


@dataclass
class ParamVector:
    """Flat float64 parameters plus the per-layer offset table."""
    values: np.ndarray
    offsets: List[LayerOffsets] = field(default_factory=list)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), list(self.offsets))


def layer_widths(spec: NetSpec) -> List[int]:
    return [spec.input_width] + [spec.hidden_width] * spec.n_hidden + [spec.d]


def offset_table(spec: NetSpec) -> List[LayerOffsets]:
    widths = layer_widths(spec)
    table = []
    pos = 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        table.append(LayerOffsets(w_start=pos, b_start=pos + fan_in * fan_out, fan_in=fan_in, fan_out=fan_out))
        pos += fan_in * fan_out + fan_out
    return table


def n_params(spec: NetSpec) -> int:
    return offset_table(spec)[-1].end


def unpack(spec: NetSpec, flat: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Views (W of shape (fan_in, fan_out), b of shape (fan_out,)) into ``flat``."""
    flat = np.asarray(flat)
    if flat.shape != (n_params(spec),):
        raise ValueError(f"parameter vector has shape {flat.shape}, spec needs ({n_params(spec)},)")
    layers = []
    for off in offset_table(spec):
        w = flat[off.w_start:off.b_start].reshape(off.fan_in, off.fan_out)
        b = flat[off.b_start:off.end]
        layers.append((w, b))
    return layers


def init_params(spec: NetSpec, rng: np.random.Generator) -> ParamVector:
    """
    W ~ N(0, 1/fan_in), zero biases, zero output layer (initial score is 0).
    """
    table = offset_table(spec)
    flat = np.zeros(table[-1].end)
    for off in table[:-1]:
        flat[off.w_start:off.b_start] = rng.normal(0.0, 1.0 / math.sqrt(off.fan_in), size=off.fan_in * off.fan_out)
    return ParamVector(flat, table)


# =============================================================================
# FORWARD / BACKWARD
# =============================================================================
def encode_time(spec: NetSpec, t: np.ndarray, horizon: float = 1.0) -> np.ndarray:
    """Time features: t/T, or sin/cos of t/T at octave frequencies."""
    tau = (np.asarray(t, dtype=np.float64) / horizon)[:, None]
    if spec.time_encoding == "sinusoidal":
        freqs = math.pi * 2.0 ** np.arange(spec.n_frequencies)
        return np.concatenate([np.sin(freqs * tau), np.cos(freqs * tau)], axis=1)
    return tau


def _silu(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    sig = expit(z)
    return z * sig, sig


def _network_input(spec: NetSpec, x: np.ndarray, t: np.ndarray, horizon: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    return np.concatenate([x.reshape(n, 3 * spec.d), encode_time(spec, t, horizon)], axis=1)


def _forward_pass(spec: NetSpec, flat: np.ndarray, x: np.ndarray, t: np.ndarray, horizon: float):
    layers = unpack(spec, flat)
    h = _network_input(spec, x, t, horizon)
    inputs, pre, gates = [], [], []
    for w, b in layers[:-1]:
        inputs.append(h)
        z = h @ w + b
        h, sig = _silu(z)
        pre.append(z)
        gates.append(sig)
    inputs.append(h)
    w, b = layers[-1]
    return h @ w + b, (inputs, pre, gates)


def forward(
    spec: NetSpec,
    params: Union[ParamVector, np.ndarray],
    x: np.ndarray,
    t: np.ndarray,
    horizon: float = 1.0,
) -> np.ndarray:
    """
    Score prediction for a batch.

    Args:
        spec: Architecture
        params: ParamVector or flat array
        x: phase batch (n, 3, d)
        t: model times (n,) or scalar
        horizon: T, used to normalize the time input

    Returns:
        Array (n, d)
    """
    flat = params.values if isinstance(params, ParamVector) else params
    out, _ = _forward_pass(spec, flat, x, t, horizon)
    return out


def backward(
    spec: NetSpec,
    params: Union[ParamVector, np.ndarray],
    x: np.ndarray,
    t: np.ndarray,
    upstream: np.ndarray,
    horizon: float = 1.0,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reverse-mode gradients of sum_n <upstream_n, forward(x_n, t_n)>.

    Returns:
        Tuple of (grad_params flat (P,), summed over the batch;
                  grad_x (n, 3, d), per batch element)
    """
    flat = params.values if isinstance(params, ParamVector) else params
    _, (inputs, pre, gates) = _forward_pass(spec, flat, x, t, horizon)
    layers = unpack(spec, flat)
    grad = np.zeros_like(flat)
    grad_layers = unpack(spec, grad)

    delta = np.asarray(upstream, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        gw, gb = grad_layers[i]
        gw[...] = inputs[i].T @ delta
        gb[...] = delta.sum(axis=0)
        delta = delta @ w.T
        if i > 0:
            z, sig = pre[i - 1], gates[i - 1]
            delta = delta * sig * (1.0 + z * (1.0 - sig))

    n = delta.shape[0]
    grad_x = delta[:, :3 * spec.d].reshape(n, 3, spec.d)
    return grad, grad_x


# =============================================================================
# SCORE MODELS
# =============================================================================
class ScoreNet:
    """Network + parameters bound together behind the ScoreModel interface."""

    def __init__(self, spec: NetSpec, params: Union[ParamVector, np.ndarray], horizon: float = 1.0):
        self.spec = spec
        self.params = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
        self.horizon = horizon
        self.d = spec.d

    def score(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return forward(self.spec, self.params, x, t, self.horizon)

    def score_vjp(self, x: np.ndarray, t: np.ndarray, v: np.ndarray) -> np.ndarray:
        _, grad_x = backward(self.spec, self.params, x, t, v, self.horizon)
        return grad_x


class ZeroScore:
    """S == 0: reduces every sampler to the linear dynamics."""

    def __init__(self, d: int):
        self.d = d

    def score(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return np.zeros((np.shape(x)[0], self.d))

    def score_vjp(self, x: np.ndarray, t: np.ndarray, v: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(x))


# =============================================================================
# CHECKPOINTS
# =============================================================================
@dataclass
class Checkpoint:
    spec: NetSpec
    params: np.ndarray
    ema: np.ndarray
    step: int
    config_hash: str
    rng_state: Dict[str, Any]
    horizon: float = 1.0
    extra: Dict[str, Any] = field(default_factory=dict)

    def model(self, use_ema: bool = True) -> ScoreNet:
        return ScoreNet(self.spec, self.ema if use_ema else self.params, self.horizon)


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """
    Write: magic, uint32 LE header length, JSON header, then the arrays
    listed in the header as little-endian float64.
    """
    path = Path(path)
    arrays = {"params": ckpt.params, "ema": ckpt.ema}
    header = {
        "version": CHECKPOINT_VERSION,
        "spec": asdict(ckpt.spec),
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "rng_state": _jsonable(ckpt.rng_state),
        "horizon": float(ckpt.horizon),
        "extra": _jsonable(ckpt.extra),
        "arrays": [[name, int(arr.size)] for name, arr in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for arr in arrays.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise CheckpointError(str(path), f"cannot write checkpoint: {exc}") from exc
    logger.debug("wrote checkpoint %s (step %d, %d params)", path, ckpt.step, ckpt.params.size)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(str(path), "checkpoint not found (run `train` first or pass --checkpoint)")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(str(path), "not a HOLD checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(str(path), f"corrupt header: {exc}") from exc
    pos += hlen
    arrays: Dict[str, np.ndarray] = {}
    for name, size in header["arrays"]:
        nbytes = 8 * size
        if pos + nbytes > len(data):
            raise CheckpointError(str(path), f"truncated array {name!r}")
        arrays[name] = np.frombuffer(data[pos:pos + nbytes], dtype="<f8").astype(np.float64)
        pos += nbytes
    spec = NetSpec(**header["spec"])
    if arrays["params"].size != n_params(spec):
        raise CheckpointError(str(path), "parameter count does not match the stored spec")
    return Checkpoint(
        spec=spec,
        params=arrays["params"],
        ema=arrays["ema"],
        step=header["step"],
        config_hash=header["config_hash"],
        rng_state=header["rng_state"],
        horizon=header.get("horizon", 1.0),
        extra=header.get("extra", {}),
    )
