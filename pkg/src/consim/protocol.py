"""Student / student-proxy question-answer protocol.

Every message is an envelope::

    magic   4 bytes  b"CONK"
    version u8       1
    type    u8       1 = query, 2 = response
    length  u32 LE   payload byte count
    payload

Query payload: ``D`` (u16), ``D`` f32 student view, ``D`` f32 target query,
pose hint ``x, y, theta`` (3 f32).

Response payload: ``n_hyp`` (u8), per hypothesis ``tx, ty, rot, likelihood``
(4 f32), map resolution (f32), ``n_cells`` (u32), per cell ``ix, iy`` (i32)
and ``primary, secondary`` (f32).  All little-endian.

Message fields are held at float32 precision so decode(encode(m)) == m.
"""

from __future__ import annotations

import enum
import math
import socket
import struct
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .grid import (
    SECTOR_WIDTH,
    GridSpec,
    PlaceClass,
    Pose2D,
    SE2Transform,
    ScoredGrid,
    _pool,
    pose_to_place_class,
    transform_grid,
)
from .perception import (
    N_HYPOTHESES,
    Hypothesis,
    SPARSITY_THRESHOLD,
    LocalizationModel,
    TeacherDataset,
    anchor_transform,
    build_object_map,
    hypothesis_weights,
    localize,
    outlier_check,
)

MAGIC = b"CONK"
VERSION = 1
MSG_QUERY = 1
MSG_RESPONSE = 2
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size
MAX_HYPOTHESES = 5

_CELL_DTYPE = np.dtype([("ix", "<i4"), ("iy", "<i4"), ("p", "<f4"), ("s", "<f4")])


class ErrorCode(enum.IntEnum):
    BAD_MAGIC = 1
    UNSUPPORTED_VERSION = 2
    TRUNCATED = 3
    NAN_FIELD = 4
    LIKELIHOOD_SUM = 5
    WRONG_TYPE = 6
    LENGTH_MISMATCH = 7
    BAD_FIELD = 8


class ProtocolError(ValueError):
    code = ErrorCode.BAD_FIELD

    def __init__(self, msg: str, code: Optional[ErrorCode] = None):
        super().__init__(msg)
        if code is not None:
            self.code = code


class BadMagic(ProtocolError):
    code = ErrorCode.BAD_MAGIC


class UnsupportedVersion(ProtocolError):
    code = ErrorCode.UNSUPPORTED_VERSION


class Truncated(ProtocolError):
    code = ErrorCode.TRUNCATED


class NaNField(ProtocolError):
    code = ErrorCode.NAN_FIELD


class LikelihoodSumError(ProtocolError):
    code = ErrorCode.LIKELIHOOD_SUM


class WrongMessageType(ProtocolError):
    code = ErrorCode.WRONG_TYPE


class LengthMismatch(ProtocolError):
    code = ErrorCode.LENGTH_MISMATCH


def _f32(x) -> float:
    return float(np.float32(x))


def _f32_array(v) -> np.ndarray:
    a = np.array(v, dtype=np.float32).ravel()
    a.flags.writeable = False
    return a


# ------------------------------------------------------------------ messages

@dataclass(frozen=True, eq=False)
class LocalizationQuery:
    student_view: np.ndarray
    target_query: np.ndarray
    pose_hint: Pose2D

    def __post_init__(self):
        sv = _f32_array(self.student_view)
        tq = _f32_array(self.target_query)
        if sv.size != tq.size:
            raise ValueError("descriptors must share a dimension")
        if sv.size == 0 or sv.size > 0xFFFF:
            raise ValueError("descriptor dimension must lie in [1, 65535]")
        for v in (sv, tq):
            if abs(float(np.linalg.norm(v.astype(np.float64))) - 1.0) > 1e-5:
                raise ValueError("descriptors must be unit norm")
        object.__setattr__(self, "student_view", sv)
        object.__setattr__(self, "target_query", tq)
        h = self.pose_hint
        # theta is kept as sent; Pose2D would re-wrap it in float64
        object.__setattr__(self, "pose_hint", _RawPose(_f32(h.x), _f32(h.y), _f32(h.theta)))

    @property
    def dim(self) -> int:
        return int(self.student_view.size)

    def __eq__(self, other):
        if not isinstance(other, LocalizationQuery):
            return NotImplemented
        return (
            self.student_view.tobytes() == other.student_view.tobytes()
            and self.target_query.tobytes() == other.target_query.tobytes()
            and self.pose_hint == other.pose_hint
        )


@dataclass(frozen=True)
class _RawPose:
    x: float
    y: float
    theta: float

    @property
    def position(self):
        return (self.x, self.y)


@dataclass(frozen=True, eq=False)
class MapResponse:
    """Hypotheses ``(transform teacher->student, likelihood)`` and the sparse
    teacher-frame object map."""

    hypotheses: Tuple[Tuple[SE2Transform, float], ...]
    map: ScoredGrid

    def __post_init__(self):
        hyps = tuple(
            (_RawTransform(_f32(t.tx), _f32(t.ty), _f32(t.rot)), _f32(w)) for t, w in self.hypotheses
        )
        if len(hyps) > MAX_HYPOTHESES:
            raise ValueError(f"at most {MAX_HYPOTHESES} hypotheses")
        object.__setattr__(self, "hypotheses", hyps)
        g = self.map
        if g.spec.origin != (0.0, 0.0):
            raise ValueError("response maps must use a frame with origin (0, 0)")
        p = g.primary.astype(np.float32).astype(np.float64)
        s = g.secondary.astype(np.float32).astype(np.float64)
        spec = GridSpec(_f32(g.spec.resolution), g.spec.width, g.spec.height)
        object.__setattr__(self, "map", ScoredGrid(spec, g.keys, p, s, _trusted=True))

    @property
    def byte_size(self) -> int:
        return HEADER_SIZE + response_payload_size(len(self.hypotheses), len(self.map))

    def __eq__(self, other):
        if not isinstance(other, MapResponse):
            return NotImplemented
        a, b = self.map, other.map
        return (
            self.hypotheses == other.hypotheses
            and a.spec.resolution == b.spec.resolution
            and np.array_equal(a.ix, b.ix)
            and np.array_equal(a.iy, b.iy)
            and np.array_equal(a.primary, b.primary)
            and np.array_equal(a.secondary, b.secondary)
        )


@dataclass(frozen=True)
class _RawTransform(SE2Transform):
    """SE2 transform whose fields are stored exactly as transmitted."""

    def __post_init__(self):
        pass


def query_payload_size(dim: int) -> int:
    return 2 + 8 * dim + 12


def response_payload_size(n_hyp: int, n_cells: int) -> int:
    return 1 + 16 * n_hyp + 4 + 4 + 16 * n_cells


def dense_map_bytes(width: int, height: int) -> int:
    """Size of the same dual-channel map sent densely as f32 pairs."""
    return 8 * width * height


# ------------------------------------------------------------------ codec

def _envelope(msg_type: int, payload: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def _open(data: bytes, expect: int) -> memoryview:
    data = memoryview(bytes(data))
    if len(data) < HEADER_SIZE:
        if bytes(data[:4]) != MAGIC[: len(data[:4])]:
            raise BadMagic("bad magic")
        raise Truncated("message shorter than envelope header")
    magic, version, msg_type, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    if msg_type != expect:
        raise WrongMessageType(f"expected message type {expect}, got {msg_type}")
    body = data[HEADER_SIZE:]
    if len(body) < length:
        raise Truncated(f"payload truncated: {len(body)} of {length} bytes")
    if len(body) > length:
        raise LengthMismatch(f"{len(body) - length} trailing bytes after payload")
    return body


def _take(body: memoryview, off: int, n: int) -> memoryview:
    if off + n > len(body):
        raise Truncated("payload ends inside a field")
    return body[off : off + n]


def encode_query(q: LocalizationQuery) -> bytes:
    d = q.dim
    payload = b"".join([
        struct.pack("<H", d),
        q.student_view.astype("<f4").tobytes(),
        q.target_query.astype("<f4").tobytes(),
        struct.pack("<3f", q.pose_hint.x, q.pose_hint.y, q.pose_hint.theta),
    ])
    return _envelope(MSG_QUERY, payload)


def decode_query(data: bytes) -> LocalizationQuery:
    body = _open(data, MSG_QUERY)
    (d,) = struct.unpack("<H", _take(body, 0, 2))
    sv = np.frombuffer(_take(body, 2, 4 * d), dtype="<f4")
    tq = np.frombuffer(_take(body, 2 + 4 * d, 4 * d), dtype="<f4")
    hint = struct.unpack("<3f", _take(body, 2 + 8 * d, 12))
    if len(body) != query_payload_size(d):
        raise LengthMismatch("query payload length does not match its dimension")
    if np.isnan(sv).any() or np.isnan(tq).any() or any(math.isnan(v) for v in hint):
        raise NaNField("NaN in query")
    if d == 0:
        raise ProtocolError("descriptor dimension is zero")
    q = LocalizationQuery.__new__(LocalizationQuery)
    object.__setattr__(q, "student_view", _f32_array(sv))
    object.__setattr__(q, "target_query", _f32_array(tq))
    object.__setattr__(q, "pose_hint", _RawPose(*hint))
    return q


def encode_response(r: MapResponse) -> bytes:
    g = r.map
    parts = [struct.pack("<B", len(r.hypotheses))]
    for t, w in r.hypotheses:
        parts.append(struct.pack("<4f", t.tx, t.ty, t.rot, w))
    cells = np.empty(len(g), dtype=_CELL_DTYPE)
    cells["ix"] = g.ix
    cells["iy"] = g.iy
    cells["p"] = g.primary
    cells["s"] = g.secondary
    parts.append(struct.pack("<fI", g.spec.resolution, len(g)))
    parts.append(cells.tobytes())
    return _envelope(MSG_RESPONSE, b"".join(parts))


def decode_response(data: bytes) -> MapResponse:
    body = _open(data, MSG_RESPONSE)
    (n_hyp,) = struct.unpack("<B", _take(body, 0, 1))
    if n_hyp > MAX_HYPOTHESES:
        raise ProtocolError(f"{n_hyp} hypotheses exceeds the maximum of {MAX_HYPOTHESES}")
    hyps = []
    off = 1
    for _ in range(n_hyp):
        tx, ty, rot, w = struct.unpack("<4f", _take(body, off, 16))
        off += 16
        hyps.append((_RawTransform(tx, ty, rot), w))
    res, n_cells = struct.unpack("<fI", _take(body, off, 8))
    off += 8
    raw = _take(body, off, 16 * n_cells)
    if len(body) != off + 16 * n_cells:
        raise LengthMismatch("response payload length does not match its cell count")
    cells = np.frombuffer(raw, dtype=_CELL_DTYPE)
    floats = [v for t, w in hyps for v in (t.tx, t.ty, t.rot, w)] + [res]
    if any(math.isnan(v) for v in floats) or np.isnan(cells["p"]).any() or np.isnan(cells["s"]).any():
        raise NaNField("NaN in response")
    if n_hyp and abs(sum(w for _, w in hyps) - 1.0) > 1e-3:
        raise LikelihoodSumError("hypothesis likelihoods do not sum to 1")
    if not (res > 0.0) or not math.isfinite(res):
        raise ProtocolError("resolution must be positive")
    ix = cells["ix"].astype(np.int64)
    iy = cells["iy"].astype(np.int64)
    if n_cells and (ix.min() < 0 or iy.min() < 0):
        raise ProtocolError("negative cell index in response map")
    width = int(ix.max()) + 1 if n_cells else 1
    height = int(iy.max()) + 1 if n_cells else 1
    spec = GridSpec(res, width, height)
    keys = iy * width + ix
    try:
        g = ScoredGrid(spec, keys, cells["p"].astype(np.float64), cells["s"].astype(np.float64))
    except ValueError as e:
        raise ProtocolError(f"invalid map cells: {e}") from None
    r = MapResponse.__new__(MapResponse)
    object.__setattr__(r, "hypotheses", tuple(hyps))
    object.__setattr__(r, "map", g)
    return r


def message_size(data: bytes) -> int:
    return len(data)


@dataclass
class ByteLedger:
    """Running totals of protocol traffic for one episode."""

    query_bytes: int = 0
    response_bytes: int = 0
    queries: int = 0
    responses: int = 0

    def record_query(self, data: bytes) -> None:
        self.query_bytes += message_size(data)
        self.queries += 1

    def record_response(self, data: bytes) -> None:
        self.response_bytes += message_size(data)
        self.responses += 1

    @property
    def total(self) -> int:
        return self.query_bytes + self.response_bytes


# ------------------------------------------------------------------ proxy

#: float32 headings this close to a sector boundary are snapped onto it
HINT_SNAP = 1e-5


def hint_place(hint) -> PlaceClass:
    """Place class of a decoded pose hint.

    Headings on a sector boundary (every axis heading is one) come back from
    float32 slightly off, possibly below the boundary; snapping restores them.
    """
    k = round(hint.theta / SECTOR_WIDTH)
    theta = k * SECTOR_WIDTH if abs(hint.theta - k * SECTOR_WIDTH) < HINT_SNAP else hint.theta
    return pose_to_place_class(Pose2D(hint.x, hint.y, theta))


def reject_response(resolution: float) -> MapResponse:
    return MapResponse((), ScoredGrid.empty(GridSpec(resolution, 1, 1)))


def proxy_handle_query(
    dataset: TeacherDataset,
    q: LocalizationQuery,
    model: LocalizationModel,
    true_place: PlaceClass,
    *,
    n_hyp: int = N_HYPOTHESES,
    tau: float = 0.0,
    theta: float = SPARSITY_THRESHOLD,
    object_map: Optional[ScoredGrid] = None,
) -> MapResponse:
    """Answer one query against the teacher's dataset.

    Places the teacher never visited come back from the oracle as the novel
    class, which is rejected unless the failure draw substitutes a random
    place.  A rejected query yields no hypotheses and an empty map.
    ``object_map`` may carry a precomputed ``build_object_map`` result for
    this query's target.
    """
    universe = dataset.place_universe()
    student_place = hint_place(q.pose_hint)
    if true_place in universe:
        hyps = localize(model, true_place, universe, n_hyp, student_place=student_place)
    elif model.rng.random() < model.failure_rate:
        n = min(n_hyp, len(universe))
        picks = model.rng.choice(len(universe), size=n, replace=False)
        hyps = [
            _hyp(universe[int(i)], w, student_place)
            for i, w in zip(picks, hypothesis_weights(n))
        ]
    else:
        hyps = []
    if not outlier_check(hyps, tau):
        return reject_response(dataset.spec.resolution)
    if object_map is None:
        object_map = build_object_map(dataset, q.target_query, theta)
    return MapResponse(tuple((h.transform, h.likelihood) for h in hyps), object_map)


def _hyp(place, w, student_place):
    return Hypothesis(place, float(w), anchor_transform(place, student_place))


class StudentProxy:
    """Teacher-side plug-in answering wire-format queries.

    Object maps are memoized per target descriptor since the dataset is fixed.
    """

    def __init__(self, dataset: TeacherDataset, model: LocalizationModel, *, n_hyp=N_HYPOTHESES,
                 tau=0.0, theta=SPARSITY_THRESHOLD, map_cache: Optional[dict] = None):
        self.dataset = dataset
        self.model = model
        self.n_hyp = n_hyp
        self.tau = tau
        self.theta = theta
        self._maps = {} if map_cache is None else map_cache

    def handle(self, q: LocalizationQuery, true_place: PlaceClass) -> MapResponse:
        key = (q.target_query.tobytes(), self.theta)
        om = self._maps.get(key)
        if om is None:
            om = build_object_map(self.dataset, q.target_query, self.theta)
            self._maps[key] = om
        return proxy_handle_query(self.dataset, q, self.model, true_place, n_hyp=self.n_hyp,
                                  tau=self.tau, theta=self.theta, object_map=om)

    def handle_bytes(self, data: bytes, true_place: PlaceClass) -> bytes:
        return encode_response(self.handle(decode_query(data), true_place))


# ------------------------------------------------------------------ merging

def merge_maps(student: ScoredGrid, response: MapResponse, weighted: bool = False) -> ScoredGrid:
    """Fold the teacher map into the student map once per hypothesis:
    primary is max-pooled, secondary sum-pooled.

    With ``weighted`` each hypothesis' copy is scaled by its likelihood
    before folding, so the top-ranked placement outscores the others.
    """
    t_spec = response.map.spec
    if not math.isclose(student.spec.resolution, t_spec.resolution, rel_tol=1e-6):
        raise ValueError(
            f"resolution mismatch: student {student.spec.resolution} vs teacher {t_spec.resolution}"
        )
    if not response.hypotheses or len(response.map) == 0:
        return student
    parts = [student]
    for t, w in response.hypotheses:
        g = transform_grid(response.map, t, student.spec)
        if weighted:
            g = ScoredGrid(student.spec, g.keys, g.primary * w, g.secondary * w, _trusted=True)
        parts.append(g)
    return _fold(student.spec, parts)


def _fold(spec: GridSpec, grids: Sequence[ScoredGrid]) -> ScoredGrid:
    # the first grid's secondary is the running total; later parts add on in
    # canonical order so the fold is independent of hypothesis order
    base = grids[0]
    rest = grids[1:]
    keys = np.concatenate([g.keys for g in rest])
    p = np.concatenate([g.primary for g in rest])
    s = np.concatenate([g.secondary for g in rest])
    k2, p2, s2 = _pool(keys, p, s)
    allk = np.union1d(base.keys, k2)
    P = np.zeros(allk.size)
    S = np.zeros(allk.size)
    i0 = np.searchsorted(allk, base.keys)
    P[i0] = base.primary
    S[i0] = base.secondary
    i1 = np.searchsorted(allk, k2)
    P[i1] = np.maximum(P[i1], p2)
    S[i1] = S[i1] + s2
    return ScoredGrid(spec, allk, P, S, _trusted=True)


# ------------------------------------------------------------------ transport

class InProcessChannel:
    """Byte-level request/response over a direct call."""

    def __init__(self, handler: Callable[[bytes], bytes]):
        self.handler = handler

    def request(self, data: bytes) -> bytes:
        return self.handler(bytes(data))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise Truncated("connection closed mid-message")
        buf += chunk
    return bytes(buf)


def read_message(sock: socket.socket) -> bytes:
    """Read one envelope-framed message from a stream socket."""
    head = _recv_exact(sock, HEADER_SIZE)
    magic, version, _, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    return head + _recv_exact(sock, length)


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def request(self, data: bytes) -> bytes:
        self.sock.sendall(data)
        return read_message(self.sock)


def serve(sock: socket.socket, handler: Callable[[bytes], bytes], max_messages: Optional[int] = None) -> int:
    """Answer framed requests on ``sock`` until EOF or ``max_messages``."""
    served = 0
    while max_messages is None or served < max_messages:
        try:
            msg = read_message(sock)
        except Truncated:
            break
        sock.sendall(handler(msg))
        served += 1
    return served


__all__ = [
    "ByteLedger",
    "ErrorCode",
    "HEADER_SIZE",
    "InProcessChannel",
    "LocalizationQuery",
    "MapResponse",
    "ProtocolError",
    "SocketChannel",
    "StudentProxy",
    "decode_query",
    "decode_response",
    "dense_map_bytes",
    "encode_query",
    "encode_response",
    "merge_maps",
    "message_size",
    "proxy_handle_query",
    "query_payload_size",
    "read_message",
    "response_payload_size",
    "serve",
]
