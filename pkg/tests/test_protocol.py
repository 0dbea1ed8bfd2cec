import struct
import threading

import numpy as np
import pytest

from heinfer import bfv, protocol
from heinfer.fixed_point import CapacityError, PlainModuliPair, RangeError, ScalingConfig
from heinfer.protocol import (ERROR, INFER_REQ, INFER_RESP, SESSION_ACK, SESSION_INIT, ClientKeys,
                              FrameError, InferenceClient, InferenceServer, InferRequest,
                              InferResponse, LocalConnection, ModelFile, ModelFormatError,
                              QuantizedModel, RemoteError, SessionAck, SessionInit, VersionError,
                              WireMessage, argmax_lowest, client_finalize, client_prepare,
                              scale_features)
from heinfer.ring import default_rng

CFG = ScalingConfig()
TEST_PAIR = PlainModuliPair(8380417, 2424833)


@pytest.fixture(scope="module")
def keys():
    return ClientKeys.generate(protocol.preset_params("test32"), default_rng(11))


def make_model(rng, f=20, n_out=4, pair=TEST_PAIR, n=32):
    W = rng.uniform(-1, 1, (n_out, f))
    b = rng.uniform(-1, 1, n_out)
    return ModelFile([f"g{k}" for k in range(f)], W, b, CFG, pair, n)


@pytest.fixture
def model(rng):
    return make_model(rng)


# -- model file ----------------------------------------------------------------


def test_model_roundtrip(model, tmp_path):
    raw = model.to_bytes()
    assert raw[:4] == b"PPCM"
    back = ModelFile.from_bytes(raw)
    assert back.to_bytes() == raw
    assert back.feature_names == model.feature_names
    assert np.array_equal(back.W, model.W) and np.array_equal(back.b, model.b)
    assert (back.cfg, back.moduli, back.n) == (model.cfg, model.moduli, model.n)
    model.save(tmp_path / "m.ppcm")
    assert ModelFile.load(tmp_path / "m.ppcm").to_bytes() == raw


def test_model_unicode_names(rng):
    m = make_model(rng, f=2)
    m.feature_names = ["snv:TP53", "cnv:Ärger"]
    assert ModelFile.from_bytes(m.to_bytes()).feature_names == ["snv:TP53", "cnv:Ärger"]


def test_model_corruption(model):
    raw = model.to_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:4] + struct.pack("<H", 9) + raw[6:], raw[:-3], raw + b"\0", raw[:8]):
        with pytest.raises(ModelFormatError):
            ModelFile.from_bytes(bad)


def test_model_invariants(rng):
    with pytest.raises(ModelFormatError):
        ModelFile(["a"], np.ones((2, 1)), np.ones(3))
    with pytest.raises(ModelFormatError):
        ModelFile(["a", "b"], np.ones((2, 1)), np.ones(2))
    with pytest.raises(ModelFormatError):
        ModelFile(["a"], np.array([[np.nan]]), np.ones(1))
    # more features than the test pair can hold
    with pytest.raises(ModelFormatError):
        ModelFile([str(k) for k in range(1 << 16)], np.zeros((1, 1 << 16)), [0.0], CFG, TEST_PAIR, 32)


def test_quantized_model_worst_case_capacity():
    W = np.full((1, 8), 10000.0)
    with pytest.raises(CapacityError):
        QuantizedModel.build(W, [0.0], CFG, TEST_PAIR)
    q = QuantizedModel.build(np.full((1, 8), 0.5), [0.25], CFG, TEST_PAIR)
    assert q.W.shape == (8, 1) and q.W[0, 0] == 8192 and q.b[0] == 262144


# -- client helpers ----------------------------------------------------------------


def test_argmax_examples():
    assert argmax_lowest([[0.1, 0.9, 0.3]]).tolist() == [1]
    assert argmax_lowest([[0.5, 0.5, 0.5]]).tolist() == [0]
    assert argmax_lowest([[1, 3, 3]]).tolist() == [1]


def test_feature_range_error_names_cell():
    X = np.zeros((3, 4))
    X[2, 1] = 256.0
    with pytest.raises(RangeError, match="row 2, column 1"):
        scale_features(X, CFG)
    X[2, 1] = -0.1
    with pytest.raises(RangeError, match="row 2, column 1"):
        scale_features(X, CFG)
    assert scale_features([[1.5, 255.99]], CFG).tolist() == [[96, 16383]]


def test_request_ciphertext_counts(keys, rng):
    twin = keys.twin
    req = client_prepare(rng.uniform(0, 255, (3, 70)), keys.public, CFG, "s", twin)
    assert req.X.chunks == 3
    assert sum(len(c) for per in req.X.cts for c in per) == 3 * 3 * 2


# -- wire format ----------------------------------------------------------------


def test_wire_roundtrip_every_type(keys, rng, model):
    twin = keys.twin
    init = SessionInit(keys.params, 6, keys.galois)
    ack = SessionAck("abc", 14, 4, 20)
    req = client_prepare(rng.uniform(0, 255, (2, 20)), keys.public, CFG, "abc", twin)
    server = InferenceServer(model)
    sid = server.open_session(init).session_id
    req.session_id = sid
    resp = server.infer(req)
    cases = [(SESSION_INIT, init, SessionInit), (SESSION_ACK, ack, SessionAck),
             (INFER_REQ, req, InferRequest), (INFER_RESP, resp, InferResponse)]
    for mtype, obj, cls in cases:
        raw = WireMessage(mtype, obj.to_payload()).to_bytes()
        msg = WireMessage.from_bytes(raw)
        assert msg.to_bytes() == raw
        again = cls.from_payload(msg.payload)
        assert again.to_payload() == obj.to_payload()
    err = protocol.error_message("protocol", "nope")
    assert WireMessage.from_bytes(err.to_bytes()) == err


def test_frame_errors():
    good = WireMessage(SESSION_ACK, b"1234").to_bytes()
    with pytest.raises(FrameError):
        WireMessage.from_bytes(b"JUNK" + good[4:])
    with pytest.raises(VersionError):
        WireMessage.from_bytes(good[:4] + struct.pack("<H", 2) + good[6:])
    with pytest.raises(FrameError):
        WireMessage.from_bytes(good[:6] + bytes([9]) + good[7:])
    with pytest.raises(FrameError):
        WireMessage.from_bytes(good[:-1])
    with pytest.raises(FrameError):
        InferRequest.from_payload(b"\x05\x00\x00\x00{bad}")


# -- server behaviour ----------------------------------------------------------------


def run_local(model, keys, X, rng=None, **kw):
    client = InferenceClient(keys, LocalConnection(InferenceServer(model)), CFG)
    return client, client.infer(X, rng, **kw)


def test_end_to_end_matches_fixed_point(model, keys, rng):
    X = rng.uniform(0, 255, (9, model.f))
    _, res = run_local(model, keys, X)
    q = model.quantize()
    want = q.scores(scale_features(X, CFG))
    assert np.array_equal(res.scaled, want)
    assert np.array_equal(res.labels, argmax_lowest(want))
    assert np.allclose(res.scores, want / 2.0 ** 20)


def test_zero_request_returns_biases(model, keys):
    _, res = run_local(model, keys, np.zeros((2, model.f)))
    assert np.array_equal(res.scaled, np.tile(model.quantize().b, (2, 1)))


def test_session_reuse_matches_fresh_sessions(model, keys, rng):
    X = [rng.uniform(0, 255, (2, model.f)) for _ in range(3)]
    server = InferenceServer(model)
    client = InferenceClient(keys, LocalConnection(server), CFG)
    reused = [client.infer(x).scaled for x in X]
    fresh = [run_local(model, keys, x)[1].scaled for x in X]
    assert all(np.array_equal(a, b) for a, b in zip(reused, fresh))
    assert len(server.sessions) == 1
    assert next(iter(server.sessions.values())).requests == 3


def test_batched_requests(model, keys, rng):
    X = rng.uniform(0, 255, (7, model.f))
    _, a = run_local(model, keys, X)
    _, b = run_local(model, keys, X, batch_rows=3)
    assert np.array_equal(a.scaled, b.scaled)


def test_feature_count_mismatch(model, keys, rng):
    client = InferenceClient(keys, LocalConnection(InferenceServer(model)), CFG)
    client.open()
    with pytest.raises(RemoteError) as e:
        client.infer(rng.uniform(0, 255, (1, model.f + 1)))
    assert e.value.code == "protocol"


def test_unknown_session(model, keys, rng):
    server = InferenceServer(model)
    req = client_prepare(rng.uniform(0, 255, (1, model.f)), keys.public, CFG, "missing", keys.twin)
    reply = server.handle(WireMessage(INFER_REQ, req.to_payload()))
    assert reply.msg_type == ERROR


def test_capacity_refusal(rng, keys):
    # a larger s_x pushes the model past the plaintext space
    m = make_model(rng, f=30000, n_out=1)
    server = InferenceServer(m)
    init = SessionInit(keys.params, 12, keys.galois)
    reply = server.handle(WireMessage(SESSION_INIT, init.to_payload()))
    assert reply.msg_type == ERROR
    assert protocol.unpack_payload(reply.payload)[0]["code"] == "capacity"


def test_moduli_mismatch_refused(rng, keys):
    m = make_model(rng, pair=PlainModuliPair(), n=8192)
    reply = InferenceServer(m).handle(WireMessage(SESSION_INIT, SessionInit(keys.params, 6, keys.galois).to_payload()))
    assert protocol.unpack_payload(reply.payload)[0]["code"] == "protocol"


def test_server_holds_no_secret(model, keys, rng, tmp_path):
    keys.save(tmp_path)
    public_only = ClientKeys.load(tmp_path, need_secret=False)
    assert all(s is None for s in public_only.secret)
    server = InferenceServer(model)
    InferenceClient(keys, LocalConnection(server), CFG).infer(rng.uniform(0, 255, (1, model.f)))

    def walk(obj, seen):
        if id(obj) in seen:
            return
        seen.add(id(obj))
        assert not isinstance(obj, bfv.SecretKey)
        if isinstance(obj, dict):
            for v in obj.values():
                walk(v, seen)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                walk(v, seen)
        elif hasattr(obj, "__dict__"):
            for v in vars(obj).values():
                walk(v, seen)

    walk(server, set())


def test_key_files_roundtrip(keys, tmp_path):
    paths = keys.save(tmp_path)
    assert sorted(p.name for p in paths.values()) == ["galois.key", "public.key", "secret.key"]
    for p in paths.values():
        assert p.read_bytes()[:4] == b"HEKF"
    back = ClientKeys.load(tmp_path)
    for a, b in zip(back.keys, keys.keys):
        assert bfv.dumps(a.secret) == bfv.dumps(b.secret)
        assert bfv.dumps(a.public) == bfv.dumps(b.public)
    with pytest.raises(protocol.ProtocolError):
        ClientKeys.read_file(paths["public"], "secret")


def test_client_finalize_checks_shape(model, keys, rng):
    server = InferenceServer(model)
    sid = server.open_session(SessionInit(keys.params, 6, keys.galois)).session_id
    req = client_prepare(rng.uniform(0, 255, (2, model.f)), keys.public, CFG, sid, keys.twin)
    resp = server.infer(req)
    with pytest.raises(protocol.ProtocolError):
        client_finalize(resp, keys.secret, CFG, keys.twin, n_rows=3)


# -- sockets ----------------------------------------------------------------


@pytest.fixture
def live_server(model):
    srv = protocol.make_server("127.0.0.1:0", InferenceServer(model))
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield "%s:%d" % srv.server_address
    srv.shutdown()
    srv.server_close()


def test_socket_inference(live_server, model, keys, rng):
    X = rng.uniform(0, 255, (3, model.f))
    with protocol.Connection(live_server, timeout=30) as conn:
        res = InferenceClient(keys, conn, CFG).infer(X)
    assert np.array_equal(res.scaled, model.quantize().scores(scale_features(X, CFG)))


def test_socket_malformed_frame_keeps_connection(live_server, keys):
    with protocol.Connection(live_server, timeout=30) as conn:
        junk = WireMessage(INFER_REQ, b"\x02\x00\x00\x00{}").to_bytes()
        junk = junk[:6] + bytes([77]) + junk[7:]  # unknown message type
        conn.sock.sendall(junk)
        reply = protocol.recv_message(conn.sock)
        assert reply.msg_type == ERROR
        # garbage payload with a valid header
        protocol.send_message(conn.sock, WireMessage(INFER_REQ, b"garbage"))
        assert protocol.recv_message(conn.sock).msg_type == ERROR
        ack = InferenceClient(keys, conn, CFG).open()
        assert ack.f == 20


def test_socket_version_mismatch_closes(live_server):
    with protocol.Connection(live_server, timeout=30) as conn:
        bad = WireMessage(SESSION_INIT, b"", version=7).to_bytes()
        conn.sock.sendall(bad)
        reply = protocol.recv_message(conn.sock)
        assert reply.msg_type == ERROR
        assert protocol.unpack_payload(reply.payload)[0]["code"] == "version"
        conn.sock.settimeout(5)
        assert conn.sock.recv(1) == b""
