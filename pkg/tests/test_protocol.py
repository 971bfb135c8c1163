import math
import socket
import struct
import threading
from importlib import resources

import numpy as np
import pytest

from consim.grid import GridSpec, PlaceClass, Pose2D, SE2Transform, ScoredGrid
from consim.perception import LocalizationModel, TeacherDataset, build_object_map
from consim.protocol import (
    HEADER_SIZE,
    ByteLedger,
    ErrorCode,
    InProcessChannel,
    LocalizationQuery,
    MapResponse,
    ProtocolError,
    SocketChannel,
    StudentProxy,
    decode_query,
    decode_response,
    dense_map_bytes,
    encode_query,
    encode_response,
    hint_place,
    merge_maps,
    message_size,
    proxy_handle_query,
    query_payload_size,
    response_payload_size,
    serve,
)

SPEC = GridSpec(0.1, 20, 20)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_query(rng, dim=None):
    dim = dim or int(rng.integers(1, 130))
    sv = unit(rng.standard_normal(dim))
    tq = unit(rng.standard_normal(dim))
    scale = 10.0 ** rng.integers(-3, 7)
    return LocalizationQuery(sv, tq, Pose2D(*(rng.uniform(-1, 1, 2) * scale), rng.uniform(-4, 4)))


def random_response(rng, n_hyp=None):
    n_hyp = int(rng.integers(0, 6)) if n_hyp is None else n_hyp
    w = rng.random(n_hyp) + 0.01
    w = w / w.sum()
    hyps = tuple((SE2Transform(*rng.uniform(-1e4, 1e4, 2), rng.uniform(-math.pi, math.pi)), float(x)) for x in w)
    W, H = int(rng.integers(1, 300)), int(rng.integers(1, 300))
    spec = GridSpec(float(rng.choice([0.05, 0.1, 0.25])), W, H)
    k = int(rng.integers(0, min(W * H, 400) + 1))
    keys = rng.choice(W * H, size=k, replace=False)
    p = rng.random(k)
    p[rng.random(k) < 0.1] = 1.0
    return MapResponse(hyps, ScoredGrid(spec, keys, p, p * rng.uniform(1, 50, k)))


# ---------------------------------------------------------------- sizes


def test_payload_size_examples():
    assert query_payload_size(64) == 526
    assert response_payload_size(1, 0) == 25
    assert response_payload_size(5, 500) == 8089
    assert dense_map_bytes(200, 200) == 320_000
    q = random_query(np.random.default_rng(0), 64)
    assert len(encode_query(q)) == HEADER_SIZE + 526 == 536
    empty = MapResponse(((SE2Transform(), 1.0),), ScoredGrid.empty(SPEC))
    assert len(encode_response(empty)) == HEADER_SIZE + 25


def test_response_size_linear_in_cells():
    rng = np.random.default_rng(4)
    for _ in range(50):
        r = random_response(rng)
        data = encode_response(r)
        assert len(data) == HEADER_SIZE + 1 + 16 * len(r.hypotheses) + 8 + 16 * len(r.map)
        assert r.byte_size == len(data) == message_size(data)


# ---------------------------------------------------------------- roundtrips


def test_query_roundtrip_1000():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        q = random_query(rng)
        data = encode_query(q)
        back = decode_query(data)
        assert back == q and encode_query(back) == data


def test_response_roundtrip_1000():
    rng = np.random.default_rng(2)
    for i in range(1000):
        r = random_response(rng, n_hyp=i % 6)
        data = encode_response(r)
        back = decode_response(data)
        assert back == r and encode_response(back) == data


def test_extreme_coordinates_roundtrip():
    big = float(np.finfo(np.float32).max)
    q = LocalizationQuery(unit([1, 0]), unit([0, 1]), Pose2D(big, -big, 0.0))
    assert decode_query(encode_query(q)) == q
    spec = GridSpec(0.1, 2**20, 2)
    r = MapResponse(((SE2Transform(big, -big, 3.0), 1.0),), ScoredGrid(spec, [2**21 - 1], [1.0], [big]))
    assert decode_response(encode_response(r)) == r


def _vectors():
    text = resources.files("consim").joinpath("data/conformance_vectors.txt").read_text()
    out = {}
    for line in text.splitlines():
        if line and not line.startswith("#"):
            name, hexstr = line.split()
            out[name] = bytes.fromhex(hexstr)
    return out


def test_conformance_vectors_reencode():
    vecs = _vectors()
    assert len(vecs) == 5
    for name, data in vecs.items():
        if name.startswith("query"):
            assert encode_query(decode_query(data)) == data
        else:
            assert encode_response(decode_response(data)) == data


def test_conformance_vectors_match_hand_layout():
    vecs = _vectors()
    q = LocalizationQuery(unit([1, 0, 0, 0]), unit([0, 1, 0, 0]), Pose2D(1.5, 2.5, 0.0))
    assert encode_query(q) == vecs["query_d4"]
    r = MapResponse(
        ((SE2Transform(0, 0, 0), 0.75), (SE2Transform(1.0, -2.0, 0.5), 0.25)),
        ScoredGrid.from_cells(GridSpec(0.1, 4, 3), {(3, 0): (0.5, 0.75), (1, 2): (1.0, 2.5)}),
    )
    assert encode_response(r) == vecs["response_two_hyp_two_cells"]
    assert encode_response(MapResponse((), ScoredGrid.empty(SPEC))) == vecs["response_reject"]
    d = decode_query(vecs["query_d2_negative"])
    assert d.pose_hint.theta == -1.5 and list(d.target_query) == [-1.0, 0.0]


# ---------------------------------------------------------------- errors


@pytest.fixture
def good():
    return encode_response(random_response(np.random.default_rng(3), 2))


def test_error_codes_are_distinct(good):
    bad_magic = b"X" + good[1:]
    bad_version = good[:4] + b"\x02" + good[5:]
    truncated = good[:-3]
    with pytest.raises(ProtocolError) as e1:
        decode_response(bad_magic)
    with pytest.raises(ProtocolError) as e2:
        decode_response(bad_version)
    with pytest.raises(ProtocolError) as e3:
        decode_response(truncated)
    codes = {e1.value.code, e2.value.code, e3.value.code}
    assert codes == {ErrorCode.BAD_MAGIC, ErrorCode.UNSUPPORTED_VERSION, ErrorCode.TRUNCATED}


def test_nan_field_rejected():
    data = bytearray(encode_query(LocalizationQuery(unit([1, 0]), unit([0, 1]), Pose2D(0, 0, 0))))
    data[-4:] = struct.pack("<f", float("nan"))
    with pytest.raises(ProtocolError) as e:
        decode_query(bytes(data))
    assert e.value.code == ErrorCode.NAN_FIELD


def test_likelihood_sum_rejected():
    payload = struct.pack("<B4f4f", 2, 0, 0, 0, 0.5, 0, 0, 0, 0.4) + struct.pack("<fI", 0.1, 0)
    data = b"CONK" + struct.pack("<BBI", 1, 2, len(payload)) + payload
    with pytest.raises(ProtocolError) as e:
        decode_response(data)
    assert e.value.code == ErrorCode.LIKELIHOOD_SUM


def test_wrong_type_and_trailing_bytes(good):
    with pytest.raises(ProtocolError) as e:
        decode_query(good)
    assert e.value.code == ErrorCode.WRONG_TYPE
    with pytest.raises(ProtocolError) as e:
        decode_response(good + b"\x00")
    assert e.value.code == ErrorCode.LENGTH_MISMATCH


def test_query_validation():
    with pytest.raises(ValueError):
        LocalizationQuery(unit([1, 0]), unit([1, 0, 0]), Pose2D(0, 0))
    with pytest.raises(ValueError):
        LocalizationQuery(np.array([2.0, 0]), unit([1, 0]), Pose2D(0, 0))


# ---------------------------------------------------------------- ledger


def test_byte_ledger():
    led = ByteLedger()
    assert led.total == 0
    q = encode_query(random_query(np.random.default_rng(0), 64))
    led.record_query(q)
    assert led.query_bytes == 536
    r = encode_response(random_response(np.random.default_rng(1), 3))
    led.record_response(r)
    assert led.response_bytes == len(r)
    assert led.total == 536 + len(r)


# ---------------------------------------------------------------- proxy


def _toy_dataset():
    spec = GridSpec(0.1, 30, 30)
    items = [
        (Pose2D(0.55, 0.55, 0.0), unit([1, 0, 0]), [(5, 5), (6, 5), (7, 5)]),
        (Pose2D(1.55, 0.55, 0.0), unit([0, 1, 0]), [(15, 5), (16, 5)]),
        (Pose2D(2.55, 1.55, math.pi / 2), unit([0.2, 0.2, 1]), [(25, 15)]),
    ]
    return TeacherDataset.from_cells(spec, items)


def test_proxy_argmax_lies_in_target_views():
    ds = _toy_dataset()
    tq = unit([1, 0, 0])
    q = LocalizationQuery(unit([0, 0, 1]), tq, Pose2D(0.55, 0.55, 0.0))
    r = proxy_handle_query(ds, q, LocalizationModel(0.0, np.random.default_rng(0)), PlaceClass(0, 0, 4))
    assert len(r.hypotheses) == 5 or len(r.hypotheses) == len(ds.place_universe())
    g = r.map
    best = int(np.argmax(g.primary))
    cell = (int(g.ix[best]), int(g.iy[best]))
    assert cell in {(5, 5), (6, 5), (7, 5)}


def test_proxy_empty_map_when_nothing_similar():
    ds = _toy_dataset()
    q = LocalizationQuery(unit([0, 0, 1]), unit([-1, -1, -0.01]), Pose2D(0.55, 0.55, 0.0))
    r = proxy_handle_query(ds, q, LocalizationModel(0.0, np.random.default_rng(0)), PlaceClass(0, 0, 4))
    assert len(r.map) == 0


def test_proxy_reject_path_leaves_student_unchanged():
    ds = _toy_dataset()
    q = LocalizationQuery(unit([0, 0, 1]), unit([1, 0, 0]), Pose2D(0.55, 0.55, 0.0))
    r = proxy_handle_query(ds, q, LocalizationModel(0.0, np.random.default_rng(0)), PlaceClass(0, 0, 4), tau=0.9)
    assert r.hypotheses == () and len(r.map) == 0
    student = ScoredGrid.from_cells(SPEC, {(1, 1): (0.4, 0.4)})
    assert merge_maps(student, decode_response(encode_response(r))) == student


def test_proxy_novel_place_is_rejected_at_pe0():
    ds = _toy_dataset()
    q = LocalizationQuery(unit([0, 0, 1]), unit([1, 0, 0]), Pose2D(9.55, 9.55, 0.0))
    r = proxy_handle_query(ds, q, LocalizationModel(0.0, np.random.default_rng(0)), PlaceClass(9, 9, 4))
    assert r.hypotheses == ()


def test_student_proxy_bytes_roundtrip():
    ds = _toy_dataset()
    proxy = StudentProxy(ds, LocalizationModel(0.0, np.random.default_rng(0)))
    q = LocalizationQuery(unit([0, 0, 1]), unit([1, 0, 0]), Pose2D(0.55, 0.55, 0.0))
    data = proxy.handle_bytes(encode_query(q), PlaceClass(0, 0, 4))
    r = decode_response(data)
    want = build_object_map(ds, unit([1, 0, 0])).cells
    got = r.map.cells
    assert set(got) == set(want)
    for c in want:
        assert got[c] == pytest.approx(want[c], rel=1e-6)


def test_hint_place_survives_float32():
    for theta, sector in ((0.0, 4), (math.pi / 2, 6), (-math.pi / 2, 2), (-math.pi, 0)):
        q = LocalizationQuery(unit([1, 0]), unit([0, 1]), Pose2D(3.35, 1.25, theta))
        assert hint_place(decode_query(encode_query(q)).pose_hint) == PlaceClass(3, 1, sector)


# ---------------------------------------------------------------- merging


def test_merge_examples():
    student = ScoredGrid.from_cells(SPEC, {(2, 2): (0.5, 0.5)})
    resp = MapResponse(((SE2Transform(), 1.0),), ScoredGrid.from_cells(SPEC, {(2, 2): (0.8, 0.8)}))
    merged = merge_maps(student, resp)
    assert merged[(2, 2)] == pytest.approx((0.8, 1.3))
    empty = MapResponse(((SE2Transform(), 1.0),), ScoredGrid.empty(SPEC))
    assert merge_maps(student, empty) == student
    twice = merge_maps(merged, resp)
    assert twice[(2, 2)][0] == merged[(2, 2)][0]
    assert twice[(2, 2)][1] - student[(2, 2)][1] == pytest.approx(2 * 0.8)


def test_merge_resolution_mismatch():
    resp = MapResponse(((SE2Transform(), 1.0),), ScoredGrid.from_cells(GridSpec(0.2, 5, 5), {(1, 1): (0.5, 0.5)}))
    with pytest.raises(ValueError):
        merge_maps(ScoredGrid.empty(SPEC), resp)


def test_weighted_merge_scales_copies():
    student = ScoredGrid.empty(SPEC)
    resp = MapResponse(
        ((SE2Transform(), 0.75), (SE2Transform(0.5, 0, 0), 0.25)),
        ScoredGrid.from_cells(SPEC, {(1, 1): (0.8, 0.8)}),
    )
    m = merge_maps(student, resp, weighted=True)
    assert m[(1, 1)] == pytest.approx((0.6, 0.6))
    assert m[(6, 1)] == pytest.approx((0.2, 0.2))


# ---------------------------------------------------------------- transports


def test_in_process_channel():
    ds = _toy_dataset()
    proxy = StudentProxy(ds, LocalizationModel(0.0, np.random.default_rng(0)))
    ch = InProcessChannel(lambda b: proxy.handle_bytes(b, PlaceClass(0, 0, 4)))
    q = LocalizationQuery(unit([0, 0, 1]), unit([1, 0, 0]), Pose2D(0.55, 0.55, 0.0))
    assert len(decode_response(ch.request(encode_query(q))).map) > 0


def test_socket_channel_matches_in_process():
    ds = _toy_dataset()
    q = LocalizationQuery(unit([0, 0, 1]), unit([1, 0, 0]), Pose2D(0.55, 0.55, 0.0))
    direct = StudentProxy(ds, LocalizationModel(0.0, np.random.default_rng(0))).handle_bytes(
        encode_query(q), PlaceClass(0, 0, 4))
    proxy = StudentProxy(ds, LocalizationModel(0.0, np.random.default_rng(0)))
    a, b = socket.socketpair()
    t = threading.Thread(target=serve, args=(b, lambda m: proxy.handle_bytes(m, PlaceClass(0, 0, 4)), 1))
    t.start()
    got = SocketChannel(a).request(encode_query(q))
    t.join(5)
    a.close()
    b.close()
    assert got == direct
