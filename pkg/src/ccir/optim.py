"""AdamW with decoupled weight decay, plus binary checkpoint I/O.

Checkpoint container layout (little-endian throughout):

    magic "NCK1" | u32 entry count | entries...
    entry: u32 path byte-length | UTF-8 path | u32 rank | u32 x rank dims
           | float32 payload (row-major)

Optimizer state lives in the same container under the reserved ``opt/``
path prefix (``opt/m/<path>``, ``opt/v/<path>``, and the scalar
``opt/step``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterSet, Tensor

CHECKPOINT_MAGIC = b"NCK1"
OPT_PREFIX = "opt/"


@dataclass
class OptimizerState:
    """First/second Adam moments per parameter and a shared step counter."""

    m: ParameterSet = field(default_factory=ParameterSet)
    v: ParameterSet = field(default_factory=ParameterSet)
    step: int = 0

    @classmethod
    def initial(cls, params: ParameterSet) -> "OptimizerState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), step=0)

    def subset(self, predicate) -> "OptimizerState":
        return OptimizerState(self.m.subset(predicate), self.v.subset(predicate), self.step)


def adamw_step(
    params: ParameterSet,
    grads: ParameterSet,
    state: OptimizerState,
    lr: float = 5e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[ParameterSet, OptimizerState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Decay is applied to the parameter directly (p -= lr * wd * p), not
    mixed into the gradient.  Every path in ``params`` must appear in
    ``grads`` and in the state moments; extra grad/state paths are an
    error too, so silent partial updates can't happen.
    """
    missing_g = [p for p in params if p not in grads]
    extra_g = [p for p in grads if p not in params]
    if missing_g or extra_g:
        raise KeyError(
            f"param/grad path mismatch: missing grads {missing_g}, unmatched grads {extra_g}"
        )
    missing_s = [p for p in params if p not in state.m or p not in state.v]
    if missing_s:
        raise KeyError(f"optimizer state lacks moments for paths {missing_s}")

    t = state.step + 1
    bias1 = 1.0 - beta1**t
    bias2 = 1.0 - beta2**t

    new_p, new_m, new_v = {}, {}, {}
    for path, p in params.items():
        g = grads[path].data
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} at {path!r}")
        m = beta1 * state.m[path].data + (1.0 - beta1) * g
        v = beta2 * state.v[path].data + (1.0 - beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        step_vec = lr * m_hat / (np.sqrt(v_hat) + eps)
        updated = p.data - step_vec - lr * weight_decay * p.data
        new_p[path] = Tensor(updated)
        new_m[path] = Tensor(m)
        new_v[path] = Tensor(v)

    # moments for paths outside this update (e.g. frozen parameters) carry over
    for path, t_m in state.m.items():
        if path not in new_m:
            new_m[path] = t_m
            new_v[path] = state.v[path]

    return ParameterSet(new_p), OptimizerState(ParameterSet(new_m), ParameterSet(new_v), t)


def halved_lr(base_lr: float, epoch: int, every: int = 10, factor: float = 0.5) -> float:
    """Step-decay schedule: multiply by ``factor`` once per ``every`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base_lr * factor ** (epoch // every)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------


def _write_entry(fh, path: str, arr: np.ndarray) -> None:
    raw = path.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<I", dim))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_checkpoint(path, params: ParameterSet, state: OptimizerState | None = None) -> None:
    """Write parameters (and optionally optimizer state) to one container."""
    for p in params:
        if p.startswith(OPT_PREFIX):
            raise ValueError(f"parameter path {p!r} collides with reserved prefix {OPT_PREFIX!r}")
    entries: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in params.items()]
    if state is not None:
        for k, t in state.m.items():
            entries.append((OPT_PREFIX + "m/" + k, t.data))
        for k, t in state.v.items():
            entries.append((OPT_PREFIX + "v/" + k, t.data))
        entries.append((OPT_PREFIX + "step", np.asarray([state.step], dtype=np.float32)))
    entries.sort(key=lambda kv: kv[0])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> tuple[ParameterSet, OptimizerState | None]:
    """Read a container written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} (expected {CHECKPOINT_MAGIC!r})")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        raw: dict[str, np.ndarray] = {}
        for _ in range(count):
            (plen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, plen).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            payload = _read_exact(fh, 4 * n)
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            if name in raw:
                raise ValueError(f"duplicate checkpoint entry {name!r}")
            raw[name] = arr
        trailing = fh.read(1)
        if trailing:
            raise ValueError("checkpoint has trailing bytes after declared entries")

    params = {k: Tensor(v) for k, v in raw.items() if not k.startswith(OPT_PREFIX)}
    m = {
        k[len(OPT_PREFIX) + 2 :]: Tensor(v)
        for k, v in raw.items()
        if k.startswith(OPT_PREFIX + "m/")
    }
    v_ = {
        k[len(OPT_PREFIX) + 2 :]: Tensor(v)
        for k, v in raw.items()
        if k.startswith(OPT_PREFIX + "v/")
    }
    state = None
    if OPT_PREFIX + "step" in raw:
        step = int(raw[OPT_PREFIX + "step"].ravel()[0])
        state = OptimizerState(ParameterSet(m), ParameterSet(v_), step)
    return ParameterSet(params), state
