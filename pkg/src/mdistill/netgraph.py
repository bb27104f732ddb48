"""Acoustic-model graphs: FSMN-style feedforward nets and projected LSTMs.

Parameters are held in a plain ``dict[str, np.ndarray]``. Weight matrices are
stored as ``(fan_in, fan_out)`` so an affine layer is ``x @ W + b``. A forward
call may carry several utterances stacked along the frame axis; ``lengths``
marks the segment boundaries and no temporal context crosses them.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .numcore import RngStream, softmax_rows

Params = dict


class Architecture(enum.IntEnum):
    FSMN = 0
    LSTM = 1


@dataclass(frozen=True)
class NetworkSpec:
    architecture: Architecture
    input_dim: int
    hidden_dim: int
    output_dim: int
    fsmn_blocks: int = 4
    lookback_order: int = 5
    lookahead_order: int = 1
    stride_back: int = 2
    stride_ahead: int = 1
    lstm_layers: int = 2
    lstm_proj_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        for f in fields(self):
            if f.name == "architecture":
                continue
            value = getattr(self, f.name)
            if int(value) != value:
                raise ValueError(f"{f.name} must be an integer")
            floor = 0 if f.name == "lookahead_order" else 1
            if value < floor:
                raise ValueError(f"{f.name} must be >= {floor}, got {value}")
        if self.output_dim < 2:
            raise ValueError("output_dim must be >= 2")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        H, L = self.hidden_dim, self.output_dim
        if self.architecture is Architecture.FSMN:
            shapes["in.W"] = (self.input_dim, H)
            shapes["in.b"] = (H,)
            for k in range(self.fsmn_blocks):
                shapes[f"mem{k}.a"] = (self.lookback_order, H)
                shapes[f"mem{k}.b"] = (self.lookahead_order, H)
                shapes[f"hid{k}.W"] = (H, H)
                shapes[f"hid{k}.b"] = (H,)
            shapes["out.W"] = (H, L)
        else:
            P = self.lstm_proj_dim
            fan_in = self.input_dim
            for k in range(self.lstm_layers):
                shapes[f"lstm{k}.Wx"] = (fan_in, 4 * H)
                shapes[f"lstm{k}.Wr"] = (P, 4 * H)
                shapes[f"lstm{k}.b"] = (4 * H,)
                shapes[f"lstm{k}.Wp"] = (H, P)
                fan_in = P
            shapes["out.W"] = (P, L)
        shapes["out.b"] = (L,)
        return shapes


def init_params(spec: NetworkSpec, rng: RngStream) -> Params:
    """Glorot-uniform weights, zero biases, zero memory coefficients.

    LSTM forget-gate biases start at 1.
    """
    params: Params = {}
    for name, shape in spec.param_shapes().items():
        kind = name.rsplit(".", 1)[1]
        if kind in ("W", "Wx", "Wr", "Wp"):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(shape, -bound, bound)
        elif kind == "b" and name.startswith("lstm"):
            b = np.zeros(shape)
            H = shape[0] // 4
            b[H:2 * H] = 1.0
            params[name] = b
        else:
            params[name] = np.zeros(shape)
    return params


def _relu(x):
    return np.maximum(x, 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _segment_positions(lengths, total: int):
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.ndim != 1 or np.any(lengths < 1) or lengths.sum() != total:
        raise ValueError(f"segment lengths {lengths.tolist()} do not cover {total} frames")
    starts = np.repeat(np.cumsum(lengths) - lengths, lengths)
    pos = np.arange(total) - starts
    return pos, np.repeat(lengths, lengths)


def _memory_offsets(n_back, n_ahead, s1, s2, pos, seglen):
    """(offset, coefficient row index, is_lookback, valid mask) per memory tap."""
    taps = []
    for i in range(n_back):
        d = (i + 1) * s1
        taps.append((d, i, True, pos >= d))
    for j in range(n_ahead):
        d = (j + 1) * s2
        taps.append((d, j, False, pos + d < seglen))
    return taps


def _shift(h, d, lookback):
    """Row r of the result holds h[r - d] (lookback) or h[r + d] (lookahead)."""
    out = np.zeros_like(h)
    if d >= h.shape[0]:
        return out
    if lookback:
        out[d:] = h[:-d]
    else:
        out[:-d] = h[d:]
    return out


def _memory_forward(h, a, b, taps):
    p = h.copy()
    for d, idx, back, valid in taps:
        coef = a[idx] if back else b[idx]
        p += coef * (_shift(h, d, back) * valid[:, None])
    return p


def _memory_backward(h, a, b, taps, dp):
    dh = dp.copy()
    da = np.zeros_like(a)
    db = np.zeros_like(b)
    for d, idx, back, valid in taps:
        g = dp * valid[:, None]
        if back:
            da[idx] = np.sum(g * _shift(h, d, True), axis=0)
            dh += _shift(g * a[idx], d, False)
        else:
            db[idx] = np.sum(g * _shift(h, d, False), axis=0)
            dh += _shift(g * b[idx], d, True)
    return dh, da, db


def fsmn_memory_block(h, a, b, stride_back: int, stride_ahead: int, lengths=None) -> np.ndarray:
    """Add strided past and future frames to each frame, weighted elementwise.

    ``a`` has one row per look-back tap and ``b`` one row per lookahead tap;
    frames outside the utterance contribute zero.
    """
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64).reshape(-1, h.shape[1]) if np.size(a) else np.zeros((0, h.shape[1]))
    b = np.asarray(b, dtype=np.float64).reshape(-1, h.shape[1]) if np.size(b) else np.zeros((0, h.shape[1]))
    if h.ndim != 2 or a.shape[1] != h.shape[1] or b.shape[1] != h.shape[1]:
        raise ValueError("memory coefficient width must match hidden width")
    if h.shape[0] < 1:
        raise ValueError("need at least one frame")
    pos, seglen = _segment_positions([h.shape[0]] if lengths is None else lengths, h.shape[0])
    taps = _memory_offsets(a.shape[0], b.shape[0], stride_back, stride_ahead, pos, seglen)
    return _memory_forward(h, a, b, taps)


@dataclass
class ForwardCache:
    params: Params
    spec: NetworkSpec
    lengths: tuple
    x: np.ndarray
    acts: dict
    n_frames: int


def _lstm_layer_forward(params, k, x, lengths):
    Wx, Wr = params[f"lstm{k}.Wx"], params[f"lstm{k}.Wr"]
    bias, Wp = params[f"lstm{k}.b"], params[f"lstm{k}.Wp"]
    H = Wp.shape[0]
    P = Wp.shape[1]
    T = x.shape[0]
    gates = np.zeros((T, 4 * H))
    c = np.zeros((T, H))
    m = np.zeros((T, H))
    r = np.zeros((T, P))
    start = 0
    for n in lengths:
        r_prev = np.zeros(P)
        c_prev = np.zeros(H)
        for t in range(start, start + n):
            # per-frame projection keeps outputs bitwise independent of later frames
            z = x[t] @ Wx + bias + r_prev @ Wr
            g = np.empty(4 * H)
            g[:2 * H] = _sigmoid(z[:2 * H])
            g[2 * H:3 * H] = np.tanh(z[2 * H:3 * H])
            g[3 * H:] = _sigmoid(z[3 * H:])
            c_t = g[H:2 * H] * c_prev + g[:H] * g[2 * H:3 * H]
            m_t = g[3 * H:] * np.tanh(c_t)
            r_t = m_t @ Wp
            gates[t], c[t], m[t], r[t] = g, c_t, m_t, r_t
            r_prev, c_prev = r_t, c_t
        start += n
    return r, {"x": x, "gates": gates, "c": c, "m": m, "r": r}


def _lstm_layer_backward(params, k, cache, dr_out, lengths, grads):
    Wx, Wr, Wp = params[f"lstm{k}.Wx"], params[f"lstm{k}.Wr"], params[f"lstm{k}.Wp"]
    H, P = Wp.shape
    x, gates, c, m = cache["x"], cache["gates"], cache["c"], cache["m"]
    T = x.shape[0]
    dz = np.zeros((T, 4 * H))
    dr_all = np.zeros((T, P))
    start = 0
    for n in lengths:
        dr_next = np.zeros(P)
        dc_next = np.zeros(H)
        for t in range(start + n - 1, start - 1, -1):
            dr = dr_out[t] + dr_next
            dr_all[t] = dr
            dm = Wp @ dr
            g = gates[t]
            i, f, gg, o = g[:H], g[H:2 * H], g[2 * H:3 * H], g[3 * H:]
            tc = np.tanh(c[t])
            dc = dc_next + dm * o * (1.0 - tc * tc)
            c_prev = c[t - 1] if t > start else np.zeros(H)
            d = np.empty(4 * H)
            d[:H] = dc * gg * i * (1.0 - i)
            d[H:2 * H] = dc * c_prev * f * (1.0 - f)
            d[2 * H:3 * H] = dc * i * (1.0 - gg * gg)
            d[3 * H:] = dm * tc * o * (1.0 - o)
            dz[t] = d
            dc_next = dc * f
            dr_next = Wr @ d
        start += n
    r_prev = np.zeros((T, P))
    start = 0
    for n in lengths:
        r_prev[start + 1:start + n] = cache["r"][start:start + n - 1]
        start += n
    grads[f"lstm{k}.Wp"] = m.T @ dr_all
    grads[f"lstm{k}.Wx"] = x.T @ dz
    grads[f"lstm{k}.Wr"] = r_prev.T @ dz
    grads[f"lstm{k}.b"] = dz.sum(axis=0)
    return dz @ Wx.T


def lstm_forward(params: Params, features, lengths=None):
    """Stacked unidirectional LSTM with recurrent projection; zero initial state.

    Returns the top-layer projected output (T x P) and the per-layer caches.
    """
    x = np.asarray(features, dtype=np.float64)
    n_layers = sum(1 for k in params if k.endswith(".Wp"))
    if n_layers == 0:
        raise ValueError("params contain no LSTM layers")
    if x.ndim != 2 or x.shape[1] != params["lstm0.Wx"].shape[0]:
        raise ValueError(f"feature dim {x.shape} does not match LSTM input dim {params['lstm0.Wx'].shape[0]}")
    lengths = (x.shape[0],) if lengths is None else tuple(int(n) for n in lengths)
    _segment_positions(lengths, x.shape[0])
    caches = []
    h = x
    for k in range(n_layers):
        h, cache = _lstm_layer_forward(params, k, h, lengths)
        caches.append(cache)
    return h, caches


def forward(params: Params, spec: NetworkSpec, features, lengths=None):
    """Unnormalized logits for every input frame."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"features of shape {x.shape} do not match input_dim {spec.input_dim}")
    T = x.shape[0]
    lengths = (T,) if lengths is None else tuple(int(n) for n in lengths)
    pos, seglen = _segment_positions(lengths, T)
    acts: dict = {}
    if spec.architecture is Architecture.FSMN:
        taps = _memory_offsets(spec.lookback_order, spec.lookahead_order,
                               spec.stride_back, spec.stride_ahead, pos, seglen)
        acts["taps"] = taps
        h = _relu(x @ params["in.W"] + params["in.b"])
        acts["h0"] = h
        for k in range(spec.fsmn_blocks):
            p = _memory_forward(h, params[f"mem{k}.a"], params[f"mem{k}.b"], taps)
            h = _relu(p @ params[f"hid{k}.W"] + params[f"hid{k}.b"])
            acts[f"p{k}"] = p
            acts[f"h{k + 1}"] = h
        top = h
    else:
        top, acts["lstm"] = lstm_forward(params, x, lengths)
    acts["top"] = top
    logits = top @ params["out.W"] + params["out.b"]
    return logits, ForwardCache(params, spec, lengths, x, acts, T)


def backward(params: Params, spec: NetworkSpec, cache: ForwardCache, dlogits) -> dict:
    """Gradient of sum(dlogits * logits) with respect to every parameter."""
    if cache.params is not params or cache.spec != spec:
        raise ValueError("forward cache does not belong to these params/spec")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (cache.n_frames, spec.output_dim):
        raise ValueError(f"dlogits shape {dlogits.shape} does not match cached forward")
    acts = cache.acts
    grads: dict = {}
    top = acts["top"]
    grads["out.W"] = top.T @ dlogits
    grads["out.b"] = dlogits.sum(axis=0)
    dtop = dlogits @ params["out.W"].T
    if spec.architecture is Architecture.FSMN:
        taps = acts["taps"]
        dh = dtop
        for k in reversed(range(spec.fsmn_blocks)):
            dz = dh * (acts[f"h{k + 1}"] > 0)
            p = acts[f"p{k}"]
            grads[f"hid{k}.W"] = p.T @ dz
            grads[f"hid{k}.b"] = dz.sum(axis=0)
            dp = dz @ params[f"hid{k}.W"].T
            dh, grads[f"mem{k}.a"], grads[f"mem{k}.b"] = _memory_backward(
                acts[f"h{k}"], params[f"mem{k}.a"], params[f"mem{k}.b"], taps, dp)
        dz = dh * (acts["h0"] > 0)
        grads["in.W"] = cache.x.T @ dz
        grads["in.b"] = dz.sum(axis=0)
    else:
        dr = dtop
        for k in reversed(range(spec.lstm_layers)):
            dr = _lstm_layer_backward(params, k, acts["lstm"][k], dr, cache.lengths, grads)
    return {name: grads[name] for name in spec.param_shapes()}


# ---------------------------------------------------------------------------
# checkpoint files

MAGIC = b"MDST"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class HeaderInconsistencyError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(params: Params, spec: NetworkSpec, path) -> None:
    shapes = spec.param_shapes()
    if set(shapes) != set(params):
        raise HeaderInconsistencyError("parameter names do not match spec")
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += struct.pack(f"<{len(fields(spec))}I", *(int(v) for v in astuple(spec)))
    out += struct.pack("<I", len(shapes))
    for name in shapes:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        if arr.shape != shapes[name]:
            raise HeaderInconsistencyError(f"{name}: shape {arr.shape} != {shapes[name]}")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack(f"<{1 + arr.ndim}I", arr.ndim, *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagicError("bad magic")
    rd = _Reader(data)
    rd.take(4)
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    header = rd.u32(len(fields(NetworkSpec)))
    try:
        spec = NetworkSpec(*header)
    except ValueError as exc:
        raise HeaderInconsistencyError(f"invalid network header: {exc}") from None
    shapes = spec.param_shapes()
    count = rd.u32()
    if count != len(shapes):
        raise HeaderInconsistencyError(f"{count} tensors stored, spec expects {len(shapes)}")
    params: Params = {}
    for _ in range(count):
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        dims = tuple(rd.u32(rank)) if rank > 1 else ((rd.u32(),) if rank == 1 else ())
        if shapes.get(name) != dims:
            raise HeaderInconsistencyError(f"tensor {name!r} has shape {dims}, expected {shapes.get(name)}")
        n = int(np.prod(dims)) if dims else 1
        params[name] = np.frombuffer(rd.take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
    if rd.pos != len(data):
        raise HeaderInconsistencyError("trailing bytes after last tensor")
    return params, spec


@dataclass
class Model:
    """A parameter set bound to its architecture, evaluated over whole utterances."""

    params: Params
    spec: NetworkSpec
    name: str = "model"

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def logits(self, frame_mats, chunk: int = 64) -> list:
        out = []
        for i in range(0, len(frame_mats), chunk):
            group = frame_mats[i:i + chunk]
            lengths = [m.shape[0] for m in group]
            z, _ = forward(self.params, self.spec, np.concatenate(group, axis=0), lengths)
            out.extend(np.split(z, np.cumsum(lengths)[:-1]))
        return out

    def posteriors(self, frame_mats, chunk: int = 64) -> list:
        return [softmax_rows(z) for z in self.logits(frame_mats, chunk)]
