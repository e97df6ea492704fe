#!/usr/bin/env python3
"""Demonstrate the split pipeline over a real loopback socket.

Starts the cloud daemon in-process, runs one oblivious session per switch
point, and writes the resulting images next to each other so the effect of
moving work between cloud and device is visible.

Usage: python scripts/demo_split.py [--prompt "..."] [--outdir demo_out]
"""

import argparse
import os

from oblix.accel import AccelConfig, never
from oblix.cli import write_ppm
from oblix.denoiser import ModelConfig, ModelWeights
from oblix.oblivious import default_lexicon
from oblix.protocol import (
    Daemon,
    ScheduleParams,
    Server,
    SessionConfig,
    SocketTransport,
    client_run_session,
)


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--prompt", default="portrait of a young woman")
    parser.add_argument("--outdir", default="demo_out")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--steps", type=int, default=25)
    args = parser.parse_args()

    os.makedirs(args.outdir, exist_ok=True)
    model_cfg = ModelConfig()
    cloud = ModelWeights.build(model_cfg, 1001)
    device = ModelWeights.build(model_cfg, 2002)   # a different small model
    lex = default_lexicon()

    daemon = Daemon(("127.0.0.1", 0), Server({"toy": cloud}))
    daemon.serve_in_background()
    host, port = daemon.server_address
    print(f"cloud daemon on {host}:{port}")
    try:
        gate_pairs = {5: (3, 3), 10: (4, 6)}   # shipped (cache, skip) points
        for k in (0, 5, 10, args.steps):
            cache_point, skip_point = gate_pairs.get(
                k, (never(args.steps), never(args.steps)))
            accel = AccelConfig(switch_point=k, cache_point=cache_point,
                                skip_point=skip_point,
                                reuse=True) if k else AccelConfig()
            session = SessionConfig(model_id="toy", seed=args.seed,
                                    accel=accel,
                                    cloud_schedule=ScheduleParams(args.steps))
            transport = SocketTransport(host, port)
            try:
                result = client_run_session(args.prompt, session, transport,
                                            device, lex)
            finally:
                transport.close()
            path = os.path.join(args.outdir, f"split_k{k:02d}.ppm")
            write_ppm(result.image, path)
            print(f"k={k:>2}: N={result.candidates.size} "
                  f"server={result.server_flops / 1e6:.0f} MFLOPs "
                  f"device={result.device_counter.total / 1e6:.0f} MFLOPs "
                  f"-> {path}")
    finally:
        daemon.shutdown()
        daemon.server_close()


if __name__ == "__main__":
    main()
