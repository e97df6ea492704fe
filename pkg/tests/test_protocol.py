import math
import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oblix.accel import AccelConfig, never
from oblix.denoiser import ModelConfig, ModelWeights, embed_prompt, run_denoise_steps
from oblix.errors import FrameError, ProtocolError
from oblix.oblivious import default_lexicon, detect_attributes, expand_candidates
from oblix.protocol import (
    ChannelModel,
    Daemon,
    GenerateRequest,
    GenerateResponse,
    MAGIC,
    ScheduleParams,
    Server,
    SessionConfig,
    SimulatedTransport,
    SocketTransport,
    build_request,
    client_run_session,
    decode_frame,
    encode_frame,
    simulate_transfer,
)
from oblix.tensor import Rng, StepCost, Tensor, fp16_roundtrip, stack_rows

CFG = ModelConfig(res=8, width=16, d_text=16, token_capacity=8)
W = ModelWeights.build(CFG, 7)
LEX = default_lexicon()


def _session(k=4, steps=8, seed=11, **accel_kw) -> SessionConfig:
    accel = AccelConfig(switch_point=k,
                        cache_point=accel_kw.pop("cache_point", never(steps)),
                        skip_point=accel_kw.pop("skip_point", never(steps)),
                        **accel_kw)
    return SessionConfig(model_id="toy", seed=seed, accel=accel,
                         cloud_schedule=ScheduleParams(steps))


def _request(**kw) -> GenerateRequest:
    base = dict(candidates=("a prompt", "another prompt"), seed=7,
                cloud_steps=3, cache_point=9, skip_point=9, reuse=False,
                refresh_period=5, pivot_index=0,
                schedule=ScheduleParams(8), model_id="toy")
    base.update(kw)
    return GenerateRequest(**base)


# --- codec ------------------------------------------------------------------

def test_request_roundtrip():
    req = _request()
    assert decode_frame(encode_frame(req)) == req


def test_response_roundtrip():
    latents = fp16_roundtrip(Rng(5).gaussian((2, 4, 8, 8)))
    resp = GenerateResponse(step_reached=5, latents=latents, flops_total=123,
                            step_costs=(StepCost(1, 60, True, False, True),
                                        StepCost(2, 63, False, True, False)))
    back = decode_frame(encode_frame(resp))
    assert isinstance(back, GenerateResponse)
    assert back.step_reached == 5
    assert back.flops_total == 123
    assert back.step_costs == resp.step_costs
    assert back.latents.same_bits(latents)


@settings(max_examples=60)
@given(st.lists(st.text(min_size=1, max_size=20), min_size=1, max_size=5),
       st.integers(0, 2**64 - 1), st.integers(0, 30), st.integers(1, 31),
       st.booleans(), st.integers(1, 10))
def test_request_roundtrip_property(cands, seed, k, point, reuse, refresh):
    req = _request(candidates=tuple(cands), seed=seed, cloud_steps=k,
                   cache_point=point, skip_point=point, reuse=reuse,
                   refresh_period=refresh)
    assert decode_frame(encode_frame(req)) == req


def test_empty_candidates_cannot_be_framed():
    with pytest.raises(FrameError):
        encode_frame(_request(candidates=()))


def test_decode_rejects_bad_magic():
    raw = bytearray(encode_frame(_request()))
    raw[0] ^= 0xFF
    with pytest.raises(ProtocolError) as err:
        decode_frame(bytes(raw))
    assert err.value.offset == 0


def test_decode_rejects_unknown_version():
    raw = bytearray(encode_frame(_request()))
    raw[5] = 99
    with pytest.raises(ProtocolError) as err:
        decode_frame(bytes(raw))
    assert "version" in str(err.value)


def test_decode_rejects_unknown_type():
    raw = bytearray(encode_frame(_request()))
    raw[4] = 42
    with pytest.raises(ProtocolError) as err:
        decode_frame(bytes(raw))
    assert "type" in str(err.value)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(0, 255), st.booleans())
def test_single_byte_corruption_never_escapes_protocol_error(pos, value, resp):
    if resp:
        latents = fp16_roundtrip(Rng(5).gaussian((2, 4, 8, 8)))
        raw = bytearray(encode_frame(GenerateResponse(
            5, latents, 9, (StepCost(1, 4, True, False, False),))))
    else:
        raw = bytearray(encode_frame(_request(candidates=("héllo", "wörld"))))
    raw[pos % len(raw)] = value
    try:
        decode_frame(bytes(raw))
    except ProtocolError:
        pass  # rejected cleanly; silent success means the bytes still parse


def test_decode_rejects_invalid_utf8_candidate():
    raw = bytearray(encode_frame(_request(candidates=("abcd",))))
    payload_start = 10 + 4 + 4  # header, count, first length prefix
    raw[payload_start] = 0xFF   # lone continuation byte, invalid UTF-8
    with pytest.raises(ProtocolError) as err:
        decode_frame(bytes(raw))
    assert "UTF-8" in str(err.value)


def test_decode_rejects_non_finite_latent_payload():
    latents = fp16_roundtrip(Rng(5).gaussian((1, 4, 8, 8)))
    raw = bytearray(encode_frame(GenerateResponse(5, latents, 0, ())))
    struct.pack_into("<H", raw, 10 + 16, 0x7C00)  # binary16 +inf
    with pytest.raises(ProtocolError) as err:
        decode_frame(bytes(raw))
    assert "non-finite" in str(err.value)


def test_decode_truncation_cites_lengths():
    raw = encode_frame(_request())
    with pytest.raises(ProtocolError) as err:
        decode_frame(raw[:-3])
    assert "length mismatch" in str(err.value)
    # consistent header, truncated interior string
    body = bytearray(raw)
    struct.pack_into("<I", body, 10 + 4, 10_000)  # first candidate length
    with pytest.raises(ProtocolError) as err:
        decode_frame(bytes(body))
    assert "truncated" in str(err.value)
    assert err.value.offset is not None


def test_equivalence_class_members_produce_identical_request_bytes():
    cfg = _session()
    req, cset = build_request("photo of a young man", cfg, LEX)
    reference = encode_frame(req)
    for member in cset.prompts:
        other, _ = build_request(member, cfg, LEX)
        assert encode_frame(other) == reference
    # the request schema carries nothing that could encode the real index
    assert not any("index" in f or "real" in f
                   for f in GenerateRequest.__dataclass_fields__
                   if f != "pivot_index")


def test_transport_failure_surfaces_as_session_error():
    from oblix.errors import SessionError

    class BrokenTransport:
        def roundtrip(self, data):
            raise ConnectionResetError("peer vanished")

    with pytest.raises(SessionError):
        client_run_session("portrait of a man", _session(k=1),
                           BrokenTransport(), W, LEX)


# --- channel model ------------------------------------------------------------

def test_transfer_zero_bytes_zero_rtt():
    assert simulate_transfer(0, ChannelModel(rtt_s=0.0)) == 0.0


def test_transfer_single_row_at_default_bandwidth():
    got = simulate_transfer(32768, ChannelModel())
    assert math.isclose(got, 0.013884, abs_tol=5e-6)
    assert abs(got - 0.013) / 0.013 < 0.10


def test_transfer_thirty_rows_matches_published_estimate():
    got = simulate_transfer(30 * 32768, ChannelModel())
    assert math.isclose(got, 0.41654, abs_tol=5e-5)
    assert abs(got - 0.39) / 0.39 < 0.10


def test_transfer_rtt_is_added():
    ch = ChannelModel(rtt_s=0.05)
    assert math.isclose(simulate_transfer(0, ch), 0.05)


# --- server ---------------------------------------------------------------------

def _server():
    return Server({"toy": W})


def test_server_k0_returns_quantized_replicated_prior():
    req = _request(cloud_steps=0, candidates=("one", "two", "three"))
    resp = _server().handle_request(req)
    base = Rng(req.seed).gaussian((CFG.channels, CFG.res, CFG.res))
    want = fp16_roundtrip(stack_rows([base, base, base]))
    assert resp.latents.same_bits(want)
    assert resp.step_reached == 8
    assert resp.flops_total == 0


def test_server_full_denoise_matches_direct_pipeline():
    req = _request(cloud_steps=8, candidates=("a calm forest",))
    resp = _server().handle_request(req)
    sched = req.schedule.build()
    base = Rng(req.seed).gaussian((CFG.channels, CFG.res, CFG.res))
    want = run_denoise_steps(stack_rows([base]),
                             [embed_prompt("a calm forest", CFG)],
                             sched, W, 1, 8)
    assert resp.step_reached == 0
    assert resp.latents.same_bits(fp16_roundtrip(want))


def test_server_is_stateless_and_deterministic():
    raw = encode_frame(_request(cloud_steps=5))
    server = _server()
    assert server.handle_frame(raw) == server.handle_frame(raw)


def test_server_row_order_follows_candidate_order():
    # oracle: each row must equal the single-candidate run of that prompt
    candidates = ("a calm forest", "a busy street")
    req = _request(cloud_steps=4, candidates=candidates)
    resp = _server().handle_request(req)
    sched = req.schedule.build()
    base = Rng(req.seed).gaussian((CFG.channels, CFG.res, CFG.res))
    for i, prompt in enumerate(candidates):
        solo = run_denoise_steps(stack_rows([base]),
                                 [embed_prompt(prompt, CFG)], sched, W, 1, 4)
        assert resp.latents.row(i).same_bits(fp16_roundtrip(solo).row(0))


def test_server_rejects_k_beyond_schedule():
    with pytest.raises(ProtocolError):
        _server().handle_request(_request(cloud_steps=9))


def test_server_rejects_unknown_model():
    with pytest.raises(ProtocolError):
        _server().handle_request(_request(model_id="giant"))


def test_server_rejects_response_frames():
    latents = fp16_roundtrip(Rng(1).gaussian((1, 4, 8, 8)))
    resp = GenerateResponse(0, latents, 0, ())
    with pytest.raises(ProtocolError):
        _server().handle_frame(encode_frame(resp))


# --- client sessions -------------------------------------------------------------

def test_session_without_detections_runs_single_candidate():
    cfg = _session(k=3)
    result = client_run_session("a quiet forest path", cfg,
                                SimulatedTransport(_server()), W, LEX)
    assert result.candidates.size == 1
    assert result.request is not None
    assert len(result.request.candidates) == 1
    assert result.image.shape == (3, 32, 32)


def test_session_transcript_contains_both_directions():
    cfg = _session(k=2)
    result = client_run_session("portrait of a man", cfg,
                                SimulatedTransport(_server()), W, LEX)
    directions = [d for d, _ in result.transcript]
    assert directions == ["sent", "received"]
    assert result.bytes_sent == len(result.transcript[0][1])
    assert result.bytes_received == len(result.transcript[1][1])


def test_session_k0_bypasses_transport():
    class ExplodingTransport:
        def roundtrip(self, data):
            raise AssertionError("transport must not be used at k=0")

    cfg = _session(k=0)
    result = client_run_session("portrait of a man", cfg,
                                ExplodingTransport(), W, LEX)
    assert result.transcript == []
    assert any("device-only" in n for n in result.notes)


def test_client_rejects_row_count_mismatch():
    class DoctoredServer(Server):
        def handle_request(self, req):
            resp = super().handle_request(req)
            return GenerateResponse(resp.step_reached,
                                    resp.latents.row(0).reshape(
                                        (1,) + resp.latents.shape[1:]),
                                    resp.flops_total, resp.step_costs)

    cfg = _session(k=1)
    with pytest.raises(ProtocolError):
        client_run_session("portrait of a man", cfg,
                           SimulatedTransport(DoctoredServer({"toy": W})),
                           W, LEX)


def test_fp16_boundary_is_the_only_lossy_point():
    cfg = _session(k=3)
    result = client_run_session("portrait of a man", cfg,
                                SimulatedTransport(_server()), W, LEX)
    boundary = result.boundary_latent
    assert boundary.same_bits(fp16_roundtrip(boundary))


def test_timestep_shift_resumes_later_on_device():
    # 4 cloud steps of an 8-step scheduler, device on 16 steps, shift 8:
    # the device resumes at iteration 13 and runs 4 steps
    accel = AccelConfig(switch_point=4, cache_point=never(8),
                        skip_point=never(8))
    cfg = SessionConfig(model_id="toy", seed=3, accel=accel,
                        cloud_schedule=ScheduleParams(8), device_steps=16,
                        dt_shift=8)
    result = client_run_session("portrait of a man", cfg,
                                SimulatedTransport(_server()), W, LEX)
    assert [s.index for s in result.device_counter.steps] == [13, 14, 15, 16]


# --- sockets -----------------------------------------------------------------------

def _with_daemon(fn):
    daemon = Daemon(("127.0.0.1", 0), _server())
    daemon.serve_in_background()
    try:
        return fn(daemon.server_address)
    finally:
        daemon.shutdown()
        daemon.server_close()


def test_socket_transport_matches_simulated_bitwise():
    cfg = _session(k=4, seed=21)

    def run(addr):
        transport = SocketTransport(addr[0], addr[1])
        try:
            return client_run_session("portrait of a young man", cfg,
                                      transport, W, LEX)
        finally:
            transport.close()

    over_socket = _with_daemon(run)
    in_process = client_run_session("portrait of a young man", cfg,
                                    SimulatedTransport(_server()), W, LEX)
    assert over_socket.image.same_bits(in_process.image)
    assert over_socket.transcript == in_process.transcript


def test_daemon_survives_malformed_magic():
    def run(addr):
        bad = socket.create_connection(addr)
        bad.sendall(b"JUNKJUNKJUNKJUNK")
        # server drops the connection
        assert bad.recv(1) == b""
        bad.close()
        # and still answers a well-formed session afterwards
        transport = SocketTransport(addr[0], addr[1])
        try:
            result = client_run_session("portrait of a man", _session(k=1),
                                        transport, W, LEX)
        finally:
            transport.close()
        return result

    result = _with_daemon(run)
    assert result.image.shape == (3, 32, 32)


def test_two_concurrent_clients_complete_independently():
    def run(addr):
        results = {}

        def one(seed):
            transport = SocketTransport(addr[0], addr[1])
            try:
                results[seed] = client_run_session(
                    "portrait of a man", _session(k=3, seed=seed),
                    transport, W, LEX)
            finally:
                transport.close()

        threads = [threading.Thread(target=one, args=(s,)) for s in (1, 2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        return results

    results = _with_daemon(run)
    assert set(results) == {1, 2}
    assert not results[1].image.same_bits(results[2].image)
    # independence: each matches its own single-client run
    solo = client_run_session("portrait of a man", _session(k=3, seed=1),
                              SimulatedTransport(_server()), W, LEX)
    assert results[1].image.same_bits(solo.image)


def test_read_frame_rejects_bad_magic_from_raw_socket():
    server_sock, client_sock = socket.socketpair()
    try:
        server_sock.sendall(b"XXXX" + bytes(6))
        from oblix.protocol import read_frame
        with pytest.raises(ProtocolError):
            read_frame(client_sock)
    finally:
        server_sock.close()
        client_sock.close()
