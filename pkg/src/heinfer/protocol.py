"""Client/server private inference: model file, wire frames, sessions.

The client owns the secret keys.  It sends public parameters and Galois
keys once (SESSION_INIT), then encrypted feature matrices (INFER_REQ).  The
server multiplies them by its plaintext model and returns packed encrypted
scores (INFER_RESP); the client decrypts, recombines the two CRT branches
and takes the argmax per row.

Frames are ``"HEIP" | version u16 | type u8 | payload_len u64 | payload``.
Every payload is ``json_len u32 | JSON header | binary blobs`` where blobs
are serialized ciphertexts/keys laid out as the header describes.
"""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time
import uuid
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import bfv
from .bfv import BfvBackend, EncryptionParams, GaloisKeySet, KeySet
from .fixed_point import (CapacityError, PlainModuliPair, RangeError, ScalingConfig,
                          TwinBackends, capacity_check, descale_output, ensure_capacity,
                          scale_array)
from .matmul import (EncodedInputMatrix, PackedResult, encode_bias, encode_inputs,
                     encode_weights, matmul, unpack_results)

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# model file
#
# "PPCM" | version u16 | n_out u32 | f u32 | names (u32 len + UTF-8 each)
# | W n_out*f f64 | b n_out f64 | s_x u16 | s_w u16 | int bits u16
# | t0 u64 | t1 u64 | n u32            (all little-endian)

MODEL_MAGIC = b"PPCM"
MODEL_VERSION = 1
_MODEL_HEAD = struct.Struct("<4sHII")
_MODEL_TAIL = struct.Struct("<HHHQQI")


@dataclass
class ModelFile:
    feature_names: list
    W: np.ndarray  # n_out x f, float64
    b: np.ndarray  # n_out
    cfg: ScalingConfig = field(default_factory=ScalingConfig)
    moduli: PlainModuliPair = field(default_factory=PlainModuliPair)
    n: int = bfv.PAPER_N

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.feature_names = [str(x) for x in self.feature_names]
        if self.W.ndim != 2:
            raise ModelFormatError("W must be a matrix")
        n_out, f = self.W.shape
        if self.b.shape[0] != n_out:
            raise ModelFormatError(f"{n_out} weight rows but {self.b.shape[0]} biases")
        if len(self.feature_names) != f:
            raise ModelFormatError(f"{f} weight columns but {len(self.feature_names)} feature names")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.b))):
            raise ModelFormatError("non-finite model parameters")
        if not capacity_check(f, self.cfg, self.moduli).ok:
            raise ModelFormatError(f"f={f} does not fit the plaintext space under {self.cfg}")

    @property
    def n_out(self) -> int:
        return self.W.shape[0]

    @property
    def f(self) -> int:
        return self.W.shape[1]

    def to_bytes(self) -> bytes:
        out = [_MODEL_HEAD.pack(MODEL_MAGIC, MODEL_VERSION, self.n_out, self.f)]
        for name in self.feature_names:
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
        out.append(self.W.astype("<f8").tobytes())
        out.append(self.b.astype("<f8").tobytes())
        c = self.cfg
        out.append(_MODEL_TAIL.pack(c.s_x, c.s_w, c.input_int_bits, self.moduli.t0, self.moduli.t1, self.n))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelFile":
        try:
            magic, version, n_out, f = _MODEL_HEAD.unpack_from(data, 0)
        except struct.error as e:
            raise ModelFormatError("truncated model header") from e
        if magic != MODEL_MAGIC:
            raise ModelFormatError("not a model file")
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        pos = _MODEL_HEAD.size
        names = []
        try:
            for _ in range(f):
                (size,) = struct.unpack_from("<I", data, pos)
                pos += 4
                if pos + size > len(data):
                    raise ModelFormatError("truncated feature name")
                names.append(data[pos:pos + size].decode("utf-8"))
                pos += size
            W = np.frombuffer(data, dtype="<f8", count=n_out * f, offset=pos).reshape(n_out, f)
            pos += 8 * n_out * f
            b = np.frombuffer(data, dtype="<f8", count=n_out, offset=pos)
            pos += 8 * n_out
            s_x, s_w, bits, t0, t1, n = _MODEL_TAIL.unpack_from(data, pos)
            pos += _MODEL_TAIL.size
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            if isinstance(e, ModelFormatError):
                raise
            raise ModelFormatError(f"corrupt model file: {e}") from e
        if pos != len(data):
            raise ModelFormatError("trailing bytes after model")
        return cls(names, W.astype(np.float64), b.astype(np.float64),
                   ScalingConfig(s_x, s_w, bits), PlainModuliPair(t0, t1), n)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelFile":
        return cls.from_bytes(Path(path).read_bytes())

    def quantize(self, s_x: int | None = None) -> "QuantizedModel":
        """Scaled integer weights (f x n_out) and biases for a client's s_x."""
        cfg = self.cfg if s_x is None else ScalingConfig(s_x, self.cfg.s_w, self.cfg.input_int_bits)
        return QuantizedModel.build(self.W, self.b, cfg, self.moduli)


@dataclass(frozen=True, eq=False)
class QuantizedModel:
    W: np.ndarray  # f x n_out int64 at scale 2**s_w
    b: np.ndarray  # n_out int64 at scale 2**(s_x+s_w)
    cfg: ScalingConfig

    @classmethod
    def build(cls, W, b, cfg: ScalingConfig, moduli: PlainModuliPair) -> "QuantizedModel":
        half = moduli.half_range
        Wq = scale_array(np.asarray(W, dtype=np.float64).T, cfg.s_w)
        bq = scale_array(b, cfg.output_exponent)
        # exact worst case over every admissible input row
        x_max = 1 << (cfg.input_int_bits + cfg.s_x)
        worst = np.abs(Wq).sum(axis=0).astype(object) * x_max + np.abs(bq).astype(object)
        if max(worst) >= half:
            raise CapacityError(
                f"worst-case score magnitude {int(max(worst)).bit_length()} bits exceeds the "
                f"plaintext space ({(half - 1).bit_length()} bits)")
        return cls(Wq, bq, cfg)

    def scores(self, Xq) -> np.ndarray:
        """Plaintext fixed-point oracle: exact Xq @ W + b."""
        Xq = np.asarray(Xq, dtype=np.int64)
        return Xq @ self.W + self.b


def scale_features(X, cfg: ScalingConfig) -> np.ndarray:
    """Check 0 <= x < 2**input_int_bits and scale by 2**s_x."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise RangeError("features must form a matrix")
    limit = float(1 << cfg.input_int_bits)
    bad = ~np.isfinite(X) | (X < 0) | (X >= limit)
    if bad.any():
        r, c = map(int, np.argwhere(bad)[0])
        raise RangeError(f"feature at row {r}, column {c} is {X[r, c]!r}; expected 0 <= x < {limit:g}")
    return scale_array(X, cfg.s_x)


def score_error_bound(X, W, cfg: ScalingConfig) -> np.ndarray:
    """Per-row bound on |fixed-point score - double score| (real units).

    Rounding errors: |dx| <= 2**-(s_x+1), |dw| <= 2**-(s_w+1),
    |db| <= 2**-(s_x+s_w+1).
    """
    X = np.abs(np.asarray(X, dtype=np.float64))
    W = np.abs(np.asarray(W, dtype=np.float64))  # n_out x f
    dx = 2.0 ** -(cfg.s_x + 1)
    dw = 2.0 ** -(cfg.s_w + 1)
    db = 2.0 ** -(cfg.output_exponent + 1)
    per = X @ np.ones(W.shape[1]) * dw
    bound = (per[:, None] + dx * W.sum(axis=1)[None, :] + dx * dw * W.shape[1] + db)
    return bound.max(axis=1)


def argmax_lowest(scores) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=1)


# --------------------------------------------------------------------------
# wire frames

WIRE_MAGIC = b"HEIP"
WIRE_VERSION = 1
_FRAME = struct.Struct("<4sHBQ")
MAX_PAYLOAD = 1 << 34

SESSION_INIT, SESSION_ACK, INFER_REQ, INFER_RESP, ERROR = 1, 2, 3, 4, 5
MESSAGE_NAMES = {SESSION_INIT: "SESSION_INIT", SESSION_ACK: "SESSION_ACK",
                 INFER_REQ: "INFER_REQ", INFER_RESP: "INFER_RESP", ERROR: "ERROR"}


class FrameError(ProtocolError):
    pass


class VersionError(FrameError):
    pass


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    payload: bytes
    version: int = WIRE_VERSION

    def to_bytes(self) -> bytes:
        return _FRAME.pack(WIRE_MAGIC, self.version, self.msg_type, len(self.payload)) + self.payload

    @classmethod
    def parse_header(cls, head: bytes) -> tuple[int, int, int]:
        if len(head) != _FRAME.size:
            raise FrameError("truncated frame header")
        magic, version, msg_type, size = _FRAME.unpack(head)
        if magic != WIRE_MAGIC:
            raise FrameError("bad frame magic")
        if version != WIRE_VERSION:
            raise VersionError(f"unsupported protocol version {version}")
        if msg_type not in MESSAGE_NAMES:
            raise FrameError(f"unknown message type {msg_type}")
        if size > MAX_PAYLOAD:
            raise FrameError("payload too large")
        return version, msg_type, size

    @classmethod
    def from_bytes(cls, data: bytes) -> "WireMessage":
        version, msg_type, size = cls.parse_header(data[:_FRAME.size])
        if len(data) != _FRAME.size + size:
            raise FrameError("frame length does not match payload_len")
        return cls(msg_type, bytes(data[_FRAME.size:]), version)


def pack_payload(header: dict, blobs=()) -> bytes:
    raw = json.dumps(header, sort_keys=True).encode()
    return b"".join([struct.pack("<I", len(raw)), raw, *blobs])


def unpack_payload(payload: bytes) -> tuple[dict, bytes, int]:
    """(header, payload, offset of the first blob)."""
    if len(payload) < 4:
        raise FrameError("payload too short")
    (size,) = struct.unpack_from("<I", payload, 0)
    if 4 + size > len(payload):
        raise FrameError("truncated payload header")
    try:
        header = json.loads(payload[4:4 + size].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FrameError(f"bad payload header: {e}") from e
    if not isinstance(header, dict):
        raise FrameError("payload header must be an object")
    return header, payload, 4 + size


def _read_objects(payload: bytes, offset: int, count: int, kind):
    out = []
    for _ in range(count):
        try:
            obj, offset = bfv.loads(payload, offset)
        except bfv.SerializationError as e:
            raise FrameError(str(e)) from e
        if not isinstance(obj, kind):
            raise FrameError(f"expected {kind.__name__}, got {type(obj).__name__}")
        out.append(obj)
    return out, offset


def error_message(code: str, message: str) -> WireMessage:
    return WireMessage(ERROR, pack_payload({"code": code, "message": message}))


# --------------------------------------------------------------------------
# payloads


@dataclass
class SessionInit:
    params: list  # EncryptionParams per modulus
    s_x: int
    galois: list  # GaloisKeySet per modulus

    def to_payload(self) -> bytes:
        header = {"params": [p.to_dict() for p in self.params], "s_x": self.s_x,
                  "n": self.params[0].n, "moduli": [p.t for p in self.params]}
        return pack_payload(header, [bfv.dumps(g) for g in self.galois])

    @classmethod
    def from_payload(cls, payload: bytes) -> "SessionInit":
        header, data, pos = unpack_payload(payload)
        try:
            params = [EncryptionParams.from_dict(d) for d in header["params"]]
            s_x = int(header["s_x"])
        except (KeyError, TypeError, ValueError) as e:
            raise FrameError(f"bad SESSION_INIT header: {e}") from e
        galois, pos = _read_objects(data, pos, len(params), GaloisKeySet)
        for p, g in zip(params, galois):
            if g.params_digest != p.digest():
                raise FrameError("Galois keys do not match the announced parameters")
        return cls(params, s_x, galois)


@dataclass
class SessionAck:
    session_id: str
    s_w: int
    n_out: int
    f: int

    def to_payload(self) -> bytes:
        return pack_payload({"session_id": self.session_id, "s_w": self.s_w,
                             "n_out": self.n_out, "f": self.f})

    @classmethod
    def from_payload(cls, payload: bytes) -> "SessionAck":
        h, _, _ = unpack_payload(payload)
        return cls(str(h["session_id"]), int(h["s_w"]), int(h["n_out"]), int(h["f"]))


@dataclass
class InferRequest:
    session_id: str
    X: EncodedInputMatrix

    def to_payload(self) -> bytes:
        X = self.X
        header = {"session_id": self.session_id, "n_rows": X.n_rows, "f": X.f,
                  "n": X.n, "moduli": len(X.cts)}
        blobs = [bfv.dumps(ct) for per_mod in X.cts for row in per_mod for ct in row]
        return pack_payload(header, blobs)

    @classmethod
    def from_payload(cls, payload: bytes) -> "InferRequest":
        h, data, pos = unpack_payload(payload)
        try:
            sid, n_rows, f, n, mods = str(h["session_id"]), int(h["n_rows"]), int(h["f"]), int(h["n"]), int(h["moduli"])
        except (KeyError, TypeError, ValueError) as e:
            raise FrameError(f"bad INFER_REQ header: {e}") from e
        if n_rows < 1 or f < 1 or n < 2 or not 1 <= mods <= 2:
            raise FrameError("bad INFER_REQ dimensions")
        chunks = -(-f // n)
        cts = []
        for _ in range(mods):
            rows = []
            for _ in range(n_rows):
                row, pos = _read_objects(data, pos, chunks, bfv.Ciphertext)
                rows.append(row)
            cts.append(rows)
        if pos != len(data):
            raise FrameError("trailing bytes in INFER_REQ")
        return cls(sid, EncodedInputMatrix(cts, n_rows, f, n))


@dataclass
class InferResponse:
    session_id: str
    Y: PackedResult
    s_w: int
    seconds: float = 0.0

    def to_payload(self) -> bytes:
        Y = self.Y
        header = {"session_id": self.session_id, "n_rows": Y.n_rows, "n_out": Y.n_out,
                  "n": Y.n, "moduli": len(Y.cts), "packed": len(Y.cts[0]), "s_w": self.s_w,
                  "seconds": self.seconds, "counters": Y.counters.as_dict()}
        return pack_payload(header, [bfv.dumps(ct) for per_mod in Y.cts for ct in per_mod])

    @classmethod
    def from_payload(cls, payload: bytes) -> "InferResponse":
        from .matmul import OpCounters
        h, data, pos = unpack_payload(payload)
        try:
            mods, packed = int(h["moduli"]), int(h["packed"])
            counters = OpCounters(**h.get("counters", {}))
        except (KeyError, TypeError, ValueError) as e:
            raise FrameError(f"bad INFER_RESP header: {e}") from e
        cts = []
        for _ in range(mods):
            part, pos = _read_objects(data, pos, packed, bfv.Ciphertext)
            cts.append(part)
        Y = PackedResult(cts, int(h["n_rows"]), int(h["n_out"]), int(h["n"]), counters)
        return cls(str(h["session_id"]), Y, int(h["s_w"]), float(h.get("seconds", 0.0)))


# --------------------------------------------------------------------------
# backends and keys


@lru_cache(maxsize=16)
def backend_for(params: EncryptionParams) -> BfvBackend:
    return BfvBackend(params)


def twin_for(params) -> TwinBackends:
    return TwinBackends([backend_for(p) for p in params])


PRESETS = ("paper8192", "test32")


def preset_params(name: str) -> list:
    """Parameter sets for both plaintext moduli."""
    if name == "paper8192":
        return [bfv.paper_params(bfv.PAPER_T0), bfv.paper_params(bfv.PAPER_T1)]
    if name == "test32":
        # small ring, primes = 1 mod 64 with a 44-bit product
        return [bfv.test_params(32, 8380417, 3), bfv.test_params(32, 2424833, 3)]
    raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")


@dataclass
class ClientKeys:
    params: list
    keys: list  # KeySet per modulus

    @classmethod
    def generate(cls, params, rng=None) -> "ClientKeys":
        return cls(list(params), [backend_for(p).keygen(rng) for p in params])

    @property
    def public(self) -> list:
        return [k.public for k in self.keys]

    @property
    def secret(self) -> list:
        return [k.secret for k in self.keys]

    @property
    def galois(self) -> list:
        return [k.galois for k in self.keys]

    @property
    def twin(self) -> TwinBackends:
        return twin_for(self.params)

    # key files: "HEKF" | version u16 | role u8 | json_len u32 | JSON params | HECT objects
    ROLES = {"secret": 1, "public": 2, "galois": 3}
    _FILE = struct.Struct("<4sHBI")

    def save(self, directory) -> dict:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        head = json.dumps({"params": [p.to_dict() for p in self.params]}).encode()
        paths = {}
        for role, code in self.ROLES.items():
            objs = getattr(self, role)
            blob = b"".join([self._FILE.pack(b"HEKF", 1, code, len(head)), head,
                             *(bfv.dumps(o) for o in objs)])
            path = d / f"{role}.key"
            path.write_bytes(blob)
            paths[role] = path
        return paths

    @classmethod
    def read_file(cls, path, role: str):
        data = Path(path).read_bytes()
        magic, version, code, size = cls._FILE.unpack_from(data, 0)
        if magic != b"HEKF" or version != 1:
            raise ProtocolError(f"{path} is not a key file")
        if code != cls.ROLES[role]:
            raise ProtocolError(f"{path} does not hold {role} keys")
        pos = cls._FILE.size
        params = [EncryptionParams.from_dict(p) for p in json.loads(data[pos:pos + size])["params"]]
        pos += size
        objs = []
        for _ in params:
            obj, pos = bfv.loads(data, pos)
            objs.append(obj)
        return params, objs

    @classmethod
    def load(cls, directory, need_secret: bool = True) -> "ClientKeys":
        d = Path(directory)
        params, public = cls.read_file(d / "public.key", "public")
        _, galois = cls.read_file(d / "galois.key", "galois")
        if need_secret:
            _, secret = cls.read_file(d / "secret.key", "secret")
        else:
            secret = [None] * len(params)
        keys = [KeySet(s, p, g) for s, p, g in zip(secret, public, galois)]
        return cls(params, keys)


# --------------------------------------------------------------------------
# client side


def client_prepare(features, public_keys, cfg: ScalingConfig, session_id: str, twin: TwinBackends,
                   rng=None) -> InferRequest:
    """Scale, range-check, CRT-split, encode and encrypt a feature matrix."""
    Xq = scale_features(features, cfg)
    return InferRequest(session_id, encode_inputs(Xq, twin, public_keys, rng))


@dataclass
class InferenceResult:
    labels: np.ndarray
    scores: np.ndarray  # real-valued, descaled
    scaled: np.ndarray  # exact integers at 2**(s_x+s_w)


def client_finalize(resp: InferResponse, secret_keys, cfg: ScalingConfig, twin: TwinBackends,
                    n_rows: int | None = None, n_out: int | None = None) -> InferenceResult:
    Y = resp.Y
    if n_rows is not None and Y.n_rows != n_rows:
        raise ProtocolError(f"response covers {Y.n_rows} rows, expected {n_rows}")
    if n_out is not None and Y.n_out != n_out:
        raise ProtocolError(f"response carries {Y.n_out} outputs, expected {n_out}")
    scaled = unpack_results(Y, twin, secret_keys)
    out_cfg = ScalingConfig(cfg.s_x, resp.s_w, cfg.input_int_bits)
    scores = descale_output(scaled.astype(np.float64) if scaled.dtype != object else
                            np.array(scaled, dtype=np.float64), out_cfg)
    return InferenceResult(argmax_lowest(scaled), scores, scaled)


# --------------------------------------------------------------------------
# server side


@dataclass
class InferenceSession:
    session_id: str
    params: list
    cfg: ScalingConfig
    galois: list
    created: float = field(default_factory=time.time)
    requests: int = 0

    @property
    def n(self) -> int:
        return self.params[0].n

    @property
    def moduli(self) -> tuple:
        return tuple(p.t for p in self.params)


class InferenceServer:
    """Holds a model and the sessions opened against it; never a secret key."""

    def __init__(self, model: ModelFile, workers: int | None = None):
        self.model = model
        self.workers = workers
        self.sessions: dict[str, InferenceSession] = {}
        self._lock = threading.Lock()
        self._encoded: dict = {}

    @classmethod
    def from_path(cls, path, workers=None) -> "InferenceServer":
        return cls(ModelFile.load(path), workers)

    def open_session(self, init: SessionInit) -> SessionAck:
        model = self.model
        moduli = tuple(p.t for p in init.params)
        if moduli != model.moduli.moduli:
            raise ProtocolError(f"session plaintext moduli {moduli} differ from the model's {model.moduli.moduli}")
        if any(p.n != model.n for p in init.params):
            raise ProtocolError(f"session ring degree differs from the model's n={model.n}")
        cfg = ScalingConfig(init.s_x, model.cfg.s_w, model.cfg.input_int_bits)
        ensure_capacity(model.f, cfg, moduli)
        session = InferenceSession(uuid.uuid4().hex, list(init.params), cfg, list(init.galois))
        with self._lock:
            self.sessions[session.session_id] = session
        return SessionAck(session.session_id, model.cfg.s_w, model.n_out, model.f)

    def session(self, session_id: str) -> InferenceSession:
        with self._lock:
            s = self.sessions.get(session_id)
        if s is None:
            raise ProtocolError(f"unknown session {session_id!r}")
        return s

    def _encoded_model(self, session: InferenceSession):
        key = (tuple(p.digest() for p in session.params), session.cfg)
        with self._lock:
            hit = self._encoded.get(key)
        if hit is None:
            twin = twin_for(session.params)
            q = self.model.quantize(session.cfg.s_x)
            hit = (encode_weights(q.W, twin), encode_bias(q.b, twin))
            with self._lock:
                self._encoded[key] = hit
        return hit

    def infer(self, req: InferRequest) -> InferResponse:
        return server_infer(req, self.session(req.session_id), self)

    def handle(self, msg: WireMessage) -> WireMessage:
        """One request frame in, one reply frame out."""
        try:
            if msg.msg_type == SESSION_INIT:
                return WireMessage(SESSION_ACK, self.open_session(SessionInit.from_payload(msg.payload)).to_payload())
            if msg.msg_type == INFER_REQ:
                return WireMessage(INFER_RESP, self.infer(InferRequest.from_payload(msg.payload)).to_payload())
            return error_message("unexpected", f"server does not accept {MESSAGE_NAMES[msg.msg_type]}")
        except CapacityError as e:
            return error_message("capacity", str(e))
        except FrameError as e:
            return error_message("malformed", str(e))
        except (ProtocolError, bfv.ParameterError) as e:
            return error_message("protocol", str(e))


def server_infer(req: InferRequest, session: InferenceSession, server: InferenceServer) -> InferResponse:
    model = server.model
    X = req.X
    if X.f != model.f:
        raise ProtocolError(f"request carries {X.f} features, model expects {model.f}")
    if X.n != session.n or len(X.cts) != len(session.params):
        raise ProtocolError("request does not match the session parameters")
    for per_mod, p in zip(X.cts, session.params):
        digest = p.digest()
        if any(ct.params_digest != digest for row in per_mod for ct in row):
            raise ProtocolError("ciphertext encrypted under different parameters")
    ensure_capacity(X.f, session.cfg, session.moduli)
    W, B = server._encoded_model(session)
    start = time.perf_counter()
    Y = matmul(X, W, B, twin_for(session.params), session.galois, workers=server.workers)
    session.requests += 1
    return InferResponse(session.session_id, Y, model.cfg.s_w, time.perf_counter() - start)


# --------------------------------------------------------------------------
# sockets


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host, int(port)


def _recv_exact(sock, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(min(size - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def recv_message(sock) -> WireMessage:
    """Read one frame; FrameError leaves the stream at the next frame."""
    head = _recv_exact(sock, _FRAME.size)
    magic, version, msg_type, size = _FRAME.unpack(head)
    if magic == WIRE_MAGIC and size <= MAX_PAYLOAD:
        payload = _recv_exact(sock, size)
    else:
        payload = b""
    WireMessage.parse_header(head)
    return WireMessage(msg_type, payload, version)


def send_message(sock, msg: WireMessage) -> None:
    sock.sendall(msg.to_bytes())


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        server: InferenceServer = self.server.inference
        while True:
            try:
                msg = recv_message(self.request)
            except ConnectionError:
                return
            except VersionError as e:
                send_message(self.request, error_message("version", str(e)))
                return
            except FrameError as e:
                send_message(self.request, error_message("malformed", str(e)))
                continue
            reply = server.handle(msg)
            send_message(self.request, reply)


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def make_server(address: str, server: InferenceServer) -> socketserver.ThreadingTCPServer:
    srv = _ThreadingServer(parse_address(address), _Handler)
    srv.inference = server
    return srv


def serve(address: str, model_path, workers: int | None = None) -> None:
    """Blocking service loop."""
    srv = make_server(address, InferenceServer.from_path(model_path, workers))
    log.info("serving %s on %s:%d", model_path, *srv.server_address)
    with srv:
        srv.serve_forever()


class RemoteError(ProtocolError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class Connection:
    """Client end of a socket connection."""

    def __init__(self, address: str, timeout: float | None = None):
        self.sock = socket.create_connection(parse_address(address), timeout=timeout)

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def request(self, msg: WireMessage) -> WireMessage:
        send_message(self.sock, msg)
        reply = recv_message(self.sock)
        if reply.msg_type == ERROR:
            h, _, _ = unpack_payload(reply.payload)
            raise RemoteError(h.get("code", "error"), h.get("message", ""))
        return reply


class LocalConnection:
    """In-process stand-in for :class:`Connection`; frames still go through bytes."""

    def __init__(self, server: InferenceServer):
        self.server = server

    def request(self, msg: WireMessage) -> WireMessage:
        reply = self.server.handle(WireMessage.from_bytes(msg.to_bytes()))
        reply = WireMessage.from_bytes(reply.to_bytes())
        if reply.msg_type == ERROR:
            h, _, _ = unpack_payload(reply.payload)
            raise RemoteError(h.get("code", "error"), h.get("message", ""))
        return reply

    def close(self):
        pass


class InferenceClient:
    def __init__(self, keys: ClientKeys, conn, cfg: ScalingConfig | None = None):
        self.keys = keys
        self.conn = conn
        self.cfg = cfg or ScalingConfig()
        self.ack: SessionAck | None = None

    def open(self) -> SessionAck:
        init = SessionInit(self.keys.params, self.cfg.s_x, self.keys.galois)
        self.ack = SessionAck.from_payload(self.conn.request(WireMessage(SESSION_INIT, init.to_payload())).payload)
        return self.ack

    def infer(self, features, rng=None, batch_rows: int | None = None) -> InferenceResult:
        if self.ack is None:
            self.open()
        X = np.asarray(features, dtype=np.float64)
        X = X[None, :] if X.ndim == 1 else X
        step = batch_rows or X.shape[0]
        parts = []
        for start in range(0, X.shape[0], step):
            req = client_prepare(X[start:start + step], self.keys.public, self.cfg,
                                 self.ack.session_id, self.keys.twin, rng)
            reply = self.conn.request(WireMessage(INFER_REQ, req.to_payload()))
            resp = InferResponse.from_payload(reply.payload)
            parts.append(client_finalize(resp, self.keys.secret, self.cfg, self.keys.twin,
                                         req.X.n_rows, self.ack.n_out))
        return InferenceResult(np.concatenate([p.labels for p in parts]),
                               np.concatenate([p.scores for p in parts]),
                               np.concatenate([p.scaled for p in parts]))
