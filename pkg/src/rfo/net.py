"""MLPs (Linear -> LayerNorm -> SiLU hidden blocks), AdamW, LR schedules,
and the flat binary checkpoint container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from . import tape as T
from .tape import Tape, Var

MAGIC = b"RFO1"
FORMAT_VERSION = 1


class NetError(ValueError):
    pass


@dataclass
class MlpParams:
    """Weights of an MLP, stored as named float64 arrays.

    Hidden layer ``i`` owns ``h{i}.w``, ``h{i}.b``, ``h{i}.ln_g``, ``h{i}.ln_b``;
    the output layer owns ``out.w`` and ``out.b``.
    """

    sizes: tuple[int, ...]
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.flat, self.tensors = _pack_flat(self.tensors)

    def flat_view(self) -> np.ndarray:
        """All parameters as one contiguous vector that aliases ``tensors``.

        Repacks if a tensor was replaced rather than updated in place.
        """
        if any(v.base is not self.flat for v in self.tensors.values()):
            self.flat, self.tensors = _pack_flat(self.tensors)
        return self.flat

    def assign(self, other: "MlpParams") -> None:
        """Copy ``other``'s values in place, keeping this object's storage."""
        if other.sizes != self.sizes:
            raise NetError(f"cannot assign sizes {other.sizes} to {self.sizes}")
        for k, v in self.tensors.items():
            v[...] = other.tensors[k]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "MlpParams":
        return MlpParams(self.sizes, {k: v.copy() for k, v in self.tensors.items()})

    def bind(self, tape: Tape, trainable: bool = True) -> "BoundMlp":
        return BoundMlp(self, {k: tape.leaf(v, trainable) for k, v in self.tensors.items()})

    def num_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def validate(self) -> None:
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            key = f"h{i}.w" if i < self.n_hidden else "out.w"
            if self.tensors[key].shape != (a, b):
                raise NetError(f"{key} has shape {self.tensors[key].shape}, expected {(a, b)}")
        for k, v in self.tensors.items():
            if not np.all(np.isfinite(v)):
                raise NetError(f"non-finite values in {k}")


def _pack_flat(tensors: Mapping[str, np.ndarray]) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    flat = np.zeros(sum(a.size for a in arrays.values()))
    views = {}
    off = 0
    for k, a in arrays.items():
        view = flat[off : off + a.size].reshape(a.shape)
        view[...] = a
        views[k] = view
        off += a.size
    return flat, views


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    gain: float = 1.0,
    out_gain: float | None = None,
) -> MlpParams:
    """Orthogonal weights, zero biases, unit LayerNorm gain, zero shift."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise NetError(f"bad layer sizes {sizes}")
    tensors: dict[str, np.ndarray] = {}
    n_hidden = len(sizes) - 2
    for i in range(n_hidden):
        a, b = sizes[i], sizes[i + 1]
        tensors[f"h{i}.w"] = _orthogonal(rng, a, b, gain)
        tensors[f"h{i}.b"] = np.zeros(b)
        tensors[f"h{i}.ln_g"] = np.ones(b)
        tensors[f"h{i}.ln_b"] = np.zeros(b)
    a, b = sizes[-2], sizes[-1]
    tensors["out.w"] = _orthogonal(rng, a, b, gain if out_gain is None else out_gain)
    tensors["out.b"] = np.zeros(b)
    return MlpParams(sizes, tensors)


def zeros_mlp(sizes: Sequence[int]) -> MlpParams:
    p = init_mlp(sizes, np.random.default_rng(0))
    for k, v in p.tensors.items():
        v[...] = 1.0 if k.endswith("ln_g") else 0.0
    return p


class BoundMlp:
    """An :class:`MlpParams` whose tensors are leaves on one tape."""

    def __init__(self, params: MlpParams, vars_: dict[str, Var]) -> None:
        self.params = params
        self.vars = vars_
        self.values = {k: v.value for k, v in vars_.items()}

    def __call__(self, x: Var) -> Var:
        return mlp_node(self, x)

    def grads(self, g: T.Gradients) -> dict[str, np.ndarray]:
        return {k: g[v] for k, v in self.vars.items()}


def mlp_forward(net: BoundMlp, x: Var) -> Var:
    """Layer-by-layer tape recording; the reference for :func:`mlp_node`.

    Hidden blocks are affine -> LayerNorm -> SiLU; the output is affine only.
    """
    p, v = net.params, net.vars
    if x.shape[-1] != p.in_dim:
        raise NetError(f"input width {x.shape[-1]} != network width {p.in_dim}")
    h = x
    for i in range(p.n_hidden):
        h = T.affine(h, v[f"h{i}.w"], v[f"h{i}.b"])
        h = T.layernorm(h, v[f"h{i}.ln_g"], v[f"h{i}.ln_b"])
        h = T.silu(h)
    return T.affine(h, v["out.w"], v["out.b"])


def mlp_node(net: BoundMlp, x: Var) -> Var:
    """The whole MLP as a single tape node.

    Same arithmetic as :func:`mlp_forward`, but one record instead of four per
    layer, which is most of the cost at rollout batch sizes.
    """
    if x.value.ndim != 2:
        return mlp_forward(net, x)
    if x.shape[1] != net.params.in_dim:
        raise NetError(f"input shape {x.shape} does not match network width {net.params.in_dim}")
    tape = x.tape
    n_hidden = net.params.n_hidden
    out, cache = _mlp_fwd(net.values, n_hidden, x.value)
    names = list(net.vars)
    parents = (x.idx, *(net.vars[k].idx for k in names))
    need_x = x.needs_grad
    need_p = any(net.vars[k].needs_grad for k in names)
    if not (need_x or need_p):
        return tape._push(out)

    def backfn(g):
        grads, gx = _mlp_bwd(net.values, n_hidden, cache, g, need_x)
        return (gx, *((grads[k] if need_p else None) for k in names))

    return tape._push(out, parents, backfn, True)


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Forward pass on plain arrays, same kernels as the tape path."""
    return mlp_forward_cached(params, x)[0]


@dataclass
class _LayerCache:
    inp: np.ndarray
    xhat: np.ndarray
    rstd: np.ndarray
    ln_out: np.ndarray
    sig: np.ndarray


def mlp_forward_cached(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list[_LayerCache]]:
    """Tape-free forward that keeps what :func:`mlp_backward` needs.

    Used for plain regression (the critics) where recording a tape per
    minibatch costs more than the arithmetic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise NetError(f"input shape {x.shape} does not match network width {params.in_dim}")
    return _mlp_fwd(params.tensors, params.n_hidden, x)


def mlp_backward(params: MlpParams, cache: list[_LayerCache], gout: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given the adjoint of the output."""
    return _mlp_bwd(params.tensors, params.n_hidden, cache, gout, False)[0]


def _mlp_fwd(t: Mapping[str, np.ndarray], n_hidden: int, x: np.ndarray):
    cache = []
    h = x
    for i in range(n_hidden):
        z = h @ t[f"h{i}.w"] + t[f"h{i}.b"]
        y, xhat, rstd = _kernels.layernorm_fwd(z, t[f"h{i}.ln_g"], t[f"h{i}.ln_b"], 1e-5)
        out, sig = _kernels.silu_fwd(y)
        cache.append(_LayerCache(h, xhat, rstd, y, sig))
        h = out
    cache.append(_LayerCache(h, None, None, None, None))
    return h @ t["out.w"] + t["out.b"], cache


def _mlp_bwd(t: Mapping[str, np.ndarray], n_hidden: int, cache, gout: np.ndarray, need_input: bool):
    grads: dict[str, np.ndarray] = {}
    h = cache[-1].inp
    grads["out.w"] = h.T @ gout
    grads["out.b"] = gout.sum(axis=0)
    g = gout @ t["out.w"].T
    gx = None
    for i in range(n_hidden - 1, -1, -1):
        c = cache[i]
        g = _kernels.silu_bwd(g, c.ln_out, c.sig)
        g, grads[f"h{i}.ln_g"], grads[f"h{i}.ln_b"] = _kernels.layernorm_bwd(g, c.xhat, c.rstd, t[f"h{i}.ln_g"])
        grads[f"h{i}.w"] = c.inp.T @ g
        grads[f"h{i}.b"] = g.sum(axis=0)
        if i or need_input:
            g = g @ t[f"h{i}.w"].T
    if need_input:
        gx = g
    return {k: grads[k] for k in t}, gx


# --------------------------------------------------------------------------
# optimisation


@dataclass
class LrSchedule:
    initial: float
    total: int
    mode: str = "linear"

    def __post_init__(self) -> None:
        if self.mode not in ("linear", "constant"):
            raise NetError(f"unknown schedule mode {self.mode!r}")


def schedule_rate(sched: LrSchedule, t: int) -> float:
    if sched.mode == "constant" or sched.total <= 0:
        return sched.initial
    return max(0.0, sched.initial * (1.0 - t / sched.total))


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.m_flat, self.m = _pack_flat(self.m)
        self.v_flat, self.v = _pack_flat(self.v)

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.tensors.items()},
            v={k: np.zeros_like(v) for k, v in params.tensors.items()},
            **kw,
        )


def adamw_step(
    params: MlpParams, grads: Mapping[str, np.ndarray], state: AdamWState, lr: float
) -> None:
    """Decoupled-weight-decay Adam with bias correction, applied in place."""
    if lr < 0:
        raise NetError("learning rate must be non-negative")
    names = list(params.tensors)
    if list(state.m) != names:
        raise NetError("optimizer state does not match the parameter blocks")
    parts = []
    for k, p in params.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise NetError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k!r}")
        parts.append(g.reshape(-1))
    gflat = np.concatenate(parts)
    if not np.all(np.isfinite(gflat)):
        bad = next(k for k in names if not np.all(np.isfinite(grads[k])))
        raise NetError(f"non-finite gradient in parameter block {bad!r}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    _kernels.adamw_update(
        params.flat_view(), gflat, state.m_flat, state.v_flat, lr, b1, b2, c1, c2, state.weight_decay, state.eps
    )


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(
    grads: dict[str, np.ndarray], max_norm: float
) -> tuple[dict[str, np.ndarray], float, float]:
    """Returns ``(clipped, norm_before, norm_after)``."""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm, norm
    scale = max_norm / norm
    clipped = {k: g * scale for k, g in grads.items()}
    return clipped, norm, global_norm(clipped)


# --------------------------------------------------------------------------
# checkpoints


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write ``RFO1`` | version | count, then name/rank/dims/values per tensor.

    Integers are little-endian uint32 (dims uint64); values are row-major
    little-endian float64.
    """
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    Path(path).write_bytes(bytes(buf))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise NetError(f"{path}: not an RFO checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise NetError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims).copy()
        off += 8 * size
    if off != len(data):
        raise NetError(f"{path}: {len(data) - off} trailing bytes")
    return out


def pack_mlp(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out = {f"{prefix}/{k}": v for k, v in params.tensors.items()}
    out[f"{prefix}/__sizes__"] = np.asarray(params.sizes, dtype=np.float64)
    return out


def unpack_mlp(prefix: str, tensors: Mapping[str, np.ndarray]) -> MlpParams:
    sizes = tuple(int(s) for s in tensors[f"{prefix}/__sizes__"])
    head = f"{prefix}/"
    body = {
        k[len(head) :]: v.copy()
        for k, v in tensors.items()
        if k.startswith(head) and not k.endswith("__sizes__")
    }
    p = MlpParams(sizes, body)
    p.validate()
    return p


def pack_adamw(prefix: str, state: AdamWState) -> dict[str, np.ndarray]:
    out = {f"{prefix}/m/{k}": v for k, v in state.m.items()}
    out.update({f"{prefix}/v/{k}": v for k, v in state.v.items()})
    out[f"{prefix}/step"] = np.asarray(float(state.step))
    return out
