#!/usr/bin/env python3
"""Sweep the switch point and candidate count, print the cost picture.

Counts real FLOPs on the toy pipeline for every grid point, then shows the
closed-form extrapolation to published per-image model costs so the two
tiers of the cost model can be eyeballed side by side.

Usage: python scripts/cost_sweep.py [--steps 25] [--seed 7]
"""

import argparse

from oblix.accel import AccelConfig, never
from oblix.costmodel import (
    counted_flops_report,
    estimate_device_flops,
    estimate_server_flops,
    transmission_bytes,
)
from oblix.denoiser import ModelConfig, ModelWeights
from oblix.oblivious import default_lexicon
from oblix.protocol import (
    ChannelModel,
    ScheduleParams,
    Server,
    SessionConfig,
    SimulatedTransport,
    client_run_session,
    simulate_transfer,
)

PROMPTS = {
    1: "a quiet mountain lake at dawn",
    2: "portrait of a male in a garden",
    6: "portrait of a young male in a garden",
}


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=25)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--reuse", action="store_true",
                        help="enable batch reuse on the server")
    args = parser.parse_args()

    model_cfg = ModelConfig()
    weights = ModelWeights.build(model_cfg, 1001)
    lex = default_lexicon()

    print(f"{'k':>4} {'N':>3} {'server MFLOPs':>14} {'device MFLOPs':>14} "
          f"{'resp bytes':>11} {'transfer s':>11}")
    for n, prompt in PROMPTS.items():
        for k in (0, 5, 10, args.steps):
            accel = AccelConfig(switch_point=k,
                                cache_point=never(args.steps),
                                skip_point=never(args.steps),
                                reuse=args.reuse)
            session = SessionConfig(
                model_id="toy", seed=args.seed, accel=accel,
                cloud_schedule=ScheduleParams(args.steps))
            transport = SimulatedTransport(Server({"toy": weights}))
            result = client_run_session(prompt, session, transport,
                                        weights, lex)
            report = counted_flops_report(result, session.channel)
            print(f"{k:>4} {n:>3} {report.server_flops / 1e6:>14.1f} "
                  f"{report.device_flops / 1e6:>14.1f} "
                  f"{report.bytes_received:>11} "
                  f"{report.modeled_transfer_s:>11.5f}")

    print("\nclosed-form extrapolation, published per-image costs "
          "(T-FLOPs, 25 steps):")
    full_cloud, full_device = 74.10 / 4, 10.90
    for n in (2, 6, 30):
        for k in (5, 10):
            server = estimate_server_flops(full_cloud, k, 25, n)
            device = estimate_device_flops(full_device, k, 25)
            secs = simulate_transfer(transmission_bytes(64, n, 2),
                                     ChannelModel())
            print(f"  k={k:>2} N={n:>2}: cloud {server:6.2f} (+{device:.2f}) "
                  f"transfer {secs:.3f}s")


if __name__ == "__main__":
    main()
