"""Wire format, transports, and the split-generation client/server.

Frame layout (all integers little-endian):

    magic "OBL1" | type u8 | version u8 | payload length u32 | payload

Request payload, fields in declared order:

    u32 candidate count, then per candidate u32 byte length + UTF-8
    u64 shared seed for the initial latent
    u32 cloud step count (switch point)
    u32 cache point | u32 skip point | u8 reuse | u32 refresh | u32 pivot
    u32 schedule steps | f32 beta start | f32 beta end | u8 spacing
    u32 model id length + UTF-8

Response payload:

    u32 step reached (schedule index of the returned latents)
    u32 batch | u32 channels | u32 res
    batch*channels*res*res values as binary16
    u64 server FLOPs total
    u32 step count, then per step u32 index | u64 flops | u8 gate flags

The request never carries anything derived from the real candidate index;
that is the content of the transcript-equality checks in `oblix.security`.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .accel import AccelConfig, AccelState
from .denoiser import ModelWeights, decode_latent, embed_prompt, run_denoise_steps
from .errors import FrameError, InternalError, ProtocolError, SessionError
from .oblivious import (
    AttributeLexicon,
    CandidateSet,
    detect_attributes,
    expand_candidates,
    extract_latent,
)
from .schedule import NoiseSchedule, StepIndexMap, build_schedule, map_timestep
from .tensor import (
    FlopsCounter,
    Rng,
    StepCost,
    Tensor,
    decode_f16,
    encode_f16,
    fp16_roundtrip,
    stack_rows,
    use_flops_counter,
)

log = logging.getLogger("oblix.protocol")

MAGIC = b"OBL1"
PROTOCOL_VERSION = 1
TYPE_REQUEST = 1
TYPE_RESPONSE = 2
_HEADER = struct.Struct("<4sBBI")
_SPACINGS = ("linear", "scaled-linear")


@dataclass(frozen=True)
class ScheduleParams:
    steps: int = 25
    beta_start: float = 0.00085
    beta_end: float = 0.012
    spacing: str = "scaled-linear"

    def __post_init__(self):
        # betas travel as binary32; canonicalize here so client and server
        # build schedules from exactly the same values
        object.__setattr__(self, "beta_start", float(np.float32(self.beta_start)))
        object.__setattr__(self, "beta_end", float(np.float32(self.beta_end)))
        if self.spacing not in _SPACINGS:
            raise FrameError(f"unknown spacing {self.spacing!r}")

    def build(self) -> NoiseSchedule:
        return build_schedule(self.steps, self.beta_start, self.beta_end,
                              self.spacing)


@dataclass(frozen=True)
class GenerateRequest:
    candidates: tuple[str, ...]
    seed: int
    cloud_steps: int
    cache_point: int
    skip_point: int
    reuse: bool
    refresh_period: int
    pivot_index: int
    schedule: ScheduleParams
    model_id: str
    version: int = PROTOCOL_VERSION

    def accel_config(self) -> AccelConfig:
        return AccelConfig(self.cloud_steps, self.cache_point, self.skip_point,
                           self.reuse, self.refresh_period, self.pivot_index)


@dataclass(frozen=True)
class GenerateResponse:
    step_reached: int
    latents: Tensor            # already binary16-quantized values
    flops_total: int
    step_costs: tuple[StepCost, ...]
    version: int = PROTOCOL_VERSION


@dataclass(frozen=True)
class ChannelModel:
    bandwidth_bps: float = 18.88e6
    rtt_s: float = 0.0

    def __post_init__(self):
        if self.bandwidth_bps <= 0:
            raise FrameError("bandwidth must be positive")


def simulate_transfer(bytes_count: int, ch: ChannelModel) -> float:
    """Modeled seconds to move ``bytes_count`` over the channel."""
    if bytes_count < 0:
        raise FrameError("byte count must be >= 0")
    return ch.rtt_s + bytes_count * 8.0 / ch.bandwidth_bps


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_frame(msg: GenerateRequest | GenerateResponse) -> bytes:
    if isinstance(msg, GenerateRequest):
        if not msg.candidates:
            raise FrameError("request needs at least one candidate prompt")
        body = bytearray()
        body += struct.pack("<I", len(msg.candidates))
        for prompt in msg.candidates:
            body += _pack_str(prompt)
        body += struct.pack("<QI", msg.seed, msg.cloud_steps)
        body += struct.pack("<IIBII", msg.cache_point, msg.skip_point,
                            1 if msg.reuse else 0, msg.refresh_period,
                            msg.pivot_index)
        body += struct.pack("<IffB", msg.schedule.steps,
                            msg.schedule.beta_start, msg.schedule.beta_end,
                            _SPACINGS.index(msg.schedule.spacing))
        body += _pack_str(msg.model_id)
        frame_type = TYPE_REQUEST
    elif isinstance(msg, GenerateResponse):
        shape = msg.latents.shape
        if len(shape) != 4:
            raise FrameError(f"latent batch must be 4-d, got {shape}")
        body = bytearray()
        body += struct.pack("<IIII", msg.step_reached, shape[0], shape[1], shape[2])
        body += encode_f16(msg.latents)
        body += struct.pack("<Q", msg.flops_total)
        body += struct.pack("<I", len(msg.step_costs))
        for sc in msg.step_costs:
            flags = (1 if sc.recompute else 0) | (2 if sc.skip else 0) \
                | (4 if sc.reuse else 0)
            body += struct.pack("<IQB", sc.index, sc.flops, flags)
        frame_type = TYPE_RESPONSE
    else:
        raise FrameError(f"cannot frame object of type {type(msg).__name__}")
    if len(body) > 0xFFFFFFFF:
        raise FrameError(f"payload of {len(body)} bytes exceeds the frame limit")
    return _HEADER.pack(MAGIC, frame_type, msg.version, len(body)) + bytes(body)


class _Reader:
    def __init__(self, raw: bytes, offset: int):
        self.raw = raw
        self.off = offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise ProtocolError(
                f"truncated payload: need {size} bytes at offset {self.off}, "
                f"have {len(self.raw) - self.off}", offset=self.off)
        vals = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return vals

    def take_str(self) -> str:
        (n,) = self.take("<I")
        if self.off + n > len(self.raw):
            raise ProtocolError(
                f"truncated string: need {n} bytes at offset {self.off}, "
                f"have {len(self.raw) - self.off}", offset=self.off)
        try:
            s = self.raw[self.off:self.off + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError(f"invalid UTF-8 in string field: {exc}",
                                offset=self.off) from None
        self.off += n
        return s


def decode_frame(raw: bytes) -> GenerateRequest | GenerateResponse:
    if len(raw) < _HEADER.size:
        raise ProtocolError(
            f"frame of {len(raw)} bytes is shorter than the {_HEADER.size}-byte "
            "header", offset=0)
    magic, frame_type, version, length = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", offset=0)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}", offset=5)
    if len(raw) != _HEADER.size + length:
        raise ProtocolError(
            f"frame length mismatch: header says {length} payload bytes, "
            f"got {len(raw) - _HEADER.size}", offset=6)
    r = _Reader(raw, _HEADER.size)

    if frame_type == TYPE_REQUEST:
        (count,) = r.take("<I")
        if count < 1:
            raise ProtocolError("request carries no candidates", offset=r.off - 4)
        candidates = tuple(r.take_str() for _ in range(count))
        seed, cloud_steps = r.take("<QI")
        cache_point, skip_point, reuse, refresh, pivot = r.take("<IIBII")
        steps, beta_start, beta_end, spacing_idx = r.take("<IffB")
        if spacing_idx >= len(_SPACINGS):
            raise ProtocolError(f"unknown spacing code {spacing_idx}",
                                offset=r.off - 1)
        model_id = r.take_str()
        _expect_end(r)
        return GenerateRequest(
            candidates, seed, cloud_steps, cache_point, skip_point,
            bool(reuse), refresh, pivot,
            ScheduleParams(steps, beta_start, beta_end, _SPACINGS[spacing_idx]),
            model_id, version,
        )
    if frame_type == TYPE_RESPONSE:
        step_reached, batch, channels, res = r.take("<IIII")
        n_vals = batch * channels * res * res
        if r.off + 2 * n_vals > len(raw):
            raise ProtocolError(
                f"truncated latent block: need {2 * n_vals} bytes at offset "
                f"{r.off}, have {len(raw) - r.off}", offset=r.off)
        try:
            latents = decode_f16(raw[r.off:r.off + 2 * n_vals],
                                 (batch, channels, res, res))
        except InternalError:
            raise ProtocolError("latent payload holds non-finite values",
                                offset=r.off) from None
        r.off += 2 * n_vals
        (flops_total,) = r.take("<Q")
        (n_steps,) = r.take("<I")
        costs = []
        for _ in range(n_steps):
            index, flops, flags = r.take("<IQB")
            costs.append(StepCost(index, flops, bool(flags & 1),
                                  bool(flags & 2), bool(flags & 4)))
        _expect_end(r)
        return GenerateResponse(step_reached, latents, flops_total,
                                tuple(costs), version)
    raise ProtocolError(f"unknown frame type {frame_type}", offset=4)


def _expect_end(r: _Reader) -> None:
    if r.off != len(r.raw):
        raise ProtocolError(
            f"{len(r.raw) - r.off} trailing bytes after payload", offset=r.off)


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------


class Server:
    """Stateless request handler; all per-request state lives on the stack.

    ``accel_paths=False`` is a reference mode that runs every step without
    the gate machinery (as if the acceleration module did not exist); the
    equivalence tests compare the default mode against it.
    """

    def __init__(self, weights: dict[str, ModelWeights],
                 accel_paths: bool = True):
        self.weights = dict(weights)
        self.accel_paths = accel_paths

    def handle_request(self, req: GenerateRequest) -> GenerateResponse:
        if req.model_id not in self.weights:
            raise ProtocolError(f"unknown model id {req.model_id!r}")
        w = self.weights[req.model_id]
        sched = req.schedule.build()
        if req.cloud_steps > sched.steps:
            raise ProtocolError(
                f"switch point {req.cloud_steps} exceeds schedule of "
                f"{sched.steps} steps")
        cfg = w.cfg
        n = len(req.candidates)

        base = Rng(req.seed).gaussian((cfg.channels, cfg.res, cfg.res))
        latents = stack_rows([base] * n)
        texts = [embed_prompt(p, cfg) for p in req.candidates]

        counter = FlopsCounter()
        if req.cloud_steps > 0:
            state = AccelState(req.accel_config(), session_id=f"req-{req.seed}") \
                if self.accel_paths else None
            with use_flops_counter(counter):
                latents = run_denoise_steps(
                    latents, texts, sched, w, 1, req.cloud_steps, state)
        return GenerateResponse(
            step_reached=sched.steps - req.cloud_steps,
            latents=fp16_roundtrip(latents),
            flops_total=counter.total,
            step_costs=tuple(counter.steps),
        )

    def handle_frame(self, raw: bytes) -> bytes:
        msg = decode_frame(raw)
        if not isinstance(msg, GenerateRequest):
            raise ProtocolError("server accepts request frames only", offset=4)
        return encode_frame(self.handle_request(msg))


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------


class SimulatedTransport:
    """In-process request/response against a Server instance."""

    def __init__(self, server: Server):
        self.server = server

    def roundtrip(self, request: bytes) -> bytes:
        return self.server.handle_frame(request)

    def close(self) -> None:
        pass


class SocketTransport:
    """One frame per request over a stream socket, connection reused."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: socket.socket | None = None

    def _connect(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.create_connection((self.host, self.port),
                                                  timeout=self.timeout)
        return self._sock

    def roundtrip(self, request: bytes) -> bytes:
        sock = self._connect()
        sock.sendall(request)
        return read_frame(sock)

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def read_frame(sock: socket.socket, prefix: bytes = b"") -> bytes:
    header = prefix + _recv_exact(sock, _HEADER.size - len(prefix))
    magic, _, _, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}", offset=0)
    return header + _recv_exact(sock, length)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError(f"connection closed after {len(buf)} of {n} bytes")
        buf += chunk
    return buf


class _DaemonHandler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                first = self.request.recv(1)
            except OSError:
                return
            if not first:
                return  # client closed the connection between frames
            try:
                frame = read_frame(self.request, prefix=first)
            except ProtocolError as exc:
                log.warning("dropping connection: %s", exc)
                return
            except OSError:
                return
            try:
                reply = self.server.oblix_server.handle_frame(frame)
            except ProtocolError as exc:
                log.warning("malformed frame: %s", exc)
                return
            self.request.sendall(reply)


class Daemon(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], server: Server):
        super().__init__(address, _DaemonHandler)
        self.oblix_server = server

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    model_id: str = "toy"
    seed: int = 0
    accel: AccelConfig = field(default_factory=AccelConfig)
    cloud_schedule: ScheduleParams = field(default_factory=ScheduleParams)
    device_steps: int | None = None          # defaults to the cloud step count
    dt_shift: int = 0
    channel: ChannelModel = field(default_factory=ChannelModel)

    def device_schedule(self) -> ScheduleParams:
        steps = self.device_steps or self.cloud_schedule.steps
        cs = self.cloud_schedule
        return ScheduleParams(steps, cs.beta_start, cs.beta_end, cs.spacing)


@dataclass
class SessionResult:
    image: Tensor
    candidates: CandidateSet
    final_latent: Tensor
    boundary_latent: Tensor | None
    request: GenerateRequest | None
    response: GenerateResponse | None
    device_counter: FlopsCounter
    transcript: list[tuple[str, bytes]]
    notes: list[str]

    @property
    def bytes_sent(self) -> int:
        return sum(len(b) for d, b in self.transcript if d == "sent")

    @property
    def bytes_received(self) -> int:
        return sum(len(b) for d, b in self.transcript if d == "received")

    @property
    def server_flops(self) -> int:
        return self.response.flops_total if self.response else 0

    @property
    def server_steps(self) -> tuple[StepCost, ...]:
        return self.response.step_costs if self.response else ()


def build_request(prompt: str, cfg: SessionConfig, lex: AttributeLexicon,
                  order_real_first: bool = False) -> tuple[GenerateRequest, CandidateSet]:
    """Oblivious transform plus request assembly.

    ``order_real_first`` is a deliberately broken debug mode that leaks the
    real index through the candidate order; the security suite uses it as
    its negative control.
    """
    detections = detect_attributes(prompt, lex)
    cset = expand_candidates(prompt, detections, lex)
    if order_real_first:
        reordered = (cset.real_prompt,) + tuple(
            p for i, p in enumerate(cset.prompts) if i != cset.real_index)
        cset = CandidateSet(reordered, 0)
    a = cfg.accel
    req = GenerateRequest(
        candidates=cset.prompts,
        seed=cfg.seed,
        cloud_steps=a.switch_point,
        cache_point=a.cache_point,
        skip_point=a.skip_point,
        reuse=a.reuse,
        refresh_period=a.refresh_period,
        pivot_index=a.pivot_index,
        schedule=cfg.cloud_schedule,
        model_id=cfg.model_id,
    )
    return req, cset


def run_device_steps(latent: Tensor, prompt: str, sched: NoiseSchedule,
                     w: ModelWeights, first_iter: int,
                     counter: FlopsCounter) -> Tensor:
    """Finish denoising one latent on the device, no accelerations."""
    if first_iter > sched.steps:
        return latent
    text = embed_prompt(prompt, w.cfg)
    batch = latent.reshape((1,) + latent.shape)
    with use_flops_counter(counter):
        out = run_denoise_steps(batch, [text], sched, w, first_iter,
                                sched.steps, accel=None)
    return out.row(0)


def client_run_session(prompt: str, cfg: SessionConfig, transport,
                       device_weights: ModelWeights,
                       lex: AttributeLexicon) -> SessionResult:
    """Full oblivious hybrid generation from the client's point of view.

    With a zero switch point there is nothing to hand off, so the session
    degenerates to device-only generation and never touches the transport.
    """
    notes: list[str] = []
    transcript: list[tuple[str, bytes]] = []
    device_counter = FlopsCounter()
    dev_params = cfg.device_schedule()
    dev_sched = dev_params.build()
    k = cfg.accel.switch_point
    dcfg = device_weights.cfg

    if k == 0:
        detections = detect_attributes(prompt, lex)
        cset = expand_candidates(prompt, detections, lex)
        notes.append("device-only: switch point 0, no cloud hand-off")
        z = Rng(cfg.seed).gaussian((dcfg.channels, dcfg.res, dcfg.res))
        final = run_device_steps(z, cset.real_prompt, dev_sched,
                                 device_weights, 1, device_counter)
        image = decode_latent(final, device_weights)
        return SessionResult(image, cset, final, None, None, None,
                             device_counter, transcript, notes)

    req, cset = build_request(prompt, cfg, lex)
    req_bytes = encode_frame(req)
    transcript.append(("sent", req_bytes))
    try:
        resp_bytes = transport.roundtrip(req_bytes)
    except OSError as exc:
        # the server is stateless, so the caller may simply retry
        raise SessionError(f"transport failure: {exc}") from exc
    transcript.append(("received", resp_bytes))
    resp = decode_frame(resp_bytes)
    if not isinstance(resp, GenerateResponse):
        raise ProtocolError("expected a response frame")
    if resp.latents.shape[0] != cset.size:
        raise ProtocolError(
            f"response carries {resp.latents.shape[0]} rows for "
            f"{cset.size} candidates")
    if resp.latents.shape[1:] != (dcfg.channels, dcfg.res, dcfg.res):
        raise ProtocolError(
            f"response latent geometry {resp.latents.shape[1:]} does not "
            f"match the device model")
    expected_boundary = cfg.cloud_schedule.steps - k
    if resp.step_reached != expected_boundary:
        raise ProtocolError(
            f"server stopped at schedule index {resp.step_reached}, "
            f"expected {expected_boundary}")

    boundary = extract_latent(resp.latents, cset)
    index_map = StepIndexMap(cfg.cloud_schedule.steps, dev_sched.steps,
                             cfg.dt_shift)
    resume_after, clamped = map_timestep(k, index_map)
    if clamped:
        notes.append(
            f"timestep shift clamped: cloud step {k} mapped to device "
            f"step {resume_after}")
    final = run_device_steps(boundary, cset.real_prompt, dev_sched,
                             device_weights, resume_after + 1, device_counter)
    image = decode_latent(final, device_weights)
    return SessionResult(image, cset, final, boundary, req, resp,
                         device_counter, transcript, notes)
