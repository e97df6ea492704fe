"""Operator surface: generate, serve, client, bench, dataset, attest.

Configuration is a flat INI file; every key mirrors a field name used by
the modules it configures.  ``OBLIX_LOG`` selects the log level.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from .accel import AccelConfig
from .costmodel import counted_flops_report
from .denoiser import ModelConfig, ModelWeights
from .errors import ConfigError, OblixError
from .oblivious import (
    AttributeLexicon,
    DEFAULT_TEMPLATES,
    default_lexicon,
    generate_corpus,
    load_templates,
    write_corpus,
    read_corpus,
)
from .protocol import (
    ChannelModel,
    Daemon,
    ScheduleParams,
    Server,
    SessionConfig,
    SimulatedTransport,
    SocketTransport,
    client_run_session,
)
from .security import (
    LEAKY_ADVERSARY,
    check_indistinguishability,
    distinguisher_experiment,
)
from .tensor import Tensor

log = logging.getLogger("oblix.cli")

BENCH_PROMPTS = {
    1: "a quiet mountain lake at dawn",
    2: "portrait of a male in a garden",
    6: "portrait of a young male in a garden",
    30: "portrait of a young african male in a garden",
}


@dataclass
class RunConfig:
    model_id: str
    model: ModelConfig
    cloud_weights: ModelWeights
    device_weights: ModelWeights
    session: SessionConfig
    transport_mode: str
    host: str
    port: int
    out_path: str
    report_path: str
    lexicon: AttributeLexicon
    templates: tuple[str, ...]


def _weights_from(section, role: str, model_cfg: ModelConfig) -> ModelWeights:
    path_key, seed_key = f"{role}_path", f"{role}_seed"
    if section.get(path_key):
        path = section[path_key]
        if not os.path.exists(path):
            raise ConfigError(f"{path_key} points at missing file {path!r}")
        return ModelWeights.load(path)
    seed = section.get(seed_key)
    if not seed:
        raise ConfigError(f"[model] needs {path_key} or {seed_key}")
    try:
        return ModelWeights.build(model_cfg, int(seed))
    except ValueError:
        raise ConfigError(f"{seed_key} must be an integer, got {seed!r}") from None


def load_run_config(path: str, seed_override: int | None = None) -> RunConfig:
    """Parse and fully validate a run config; all referenced files must
    exist and parse before any computation starts."""
    if not os.path.exists(path):
        raise ConfigError(f"config file {path!r} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path)

    model_sec = parser["model"] if parser.has_section("model") else {}
    model_cfg = ModelConfig(
        channels=int(model_sec.get("channels", 4)),
        res=int(model_sec.get("res", 16)),
        d_text=int(model_sec.get("d_text", 32)),
        width=int(model_sec.get("width", 32)),
        token_capacity=int(model_sec.get("token_capacity", 16)),
        heads=int(model_sec.get("heads", 1)),
    )
    cloud = _weights_from(model_sec, "cloud", model_cfg)
    device = _weights_from(model_sec, "device", model_cfg)

    sched_sec = parser["schedule"] if parser.has_section("schedule") else {}
    schedule = ScheduleParams(
        steps=int(sched_sec.get("steps", 25)),
        beta_start=float(sched_sec.get("beta_start", 0.00085)),
        beta_end=float(sched_sec.get("beta_end", 0.012)),
        spacing=sched_sec.get("spacing", "scaled-linear"),
    )
    schedule.build()  # validate early
    device_steps = sched_sec.get("device_steps")

    accel_sec = parser["accel"] if parser.has_section("accel") else {}
    default_never = schedule.steps + 1
    accel = AccelConfig(
        switch_point=int(accel_sec.get("switch_point", 0)),
        cache_point=int(accel_sec.get("cache_point", default_never)),
        skip_point=int(accel_sec.get("skip_point", default_never)),
        reuse=str(accel_sec.get("reuse", "false")).lower() in ("1", "true", "yes", "on"),
        refresh_period=int(accel_sec.get("refresh_period", 5)),
        pivot_index=int(accel_sec.get("pivot_index", 0)),
    )
    if accel.switch_point > schedule.steps:
        raise ConfigError(
            f"switch_point {accel.switch_point} exceeds {schedule.steps} steps")

    chan_sec = parser["channel"] if parser.has_section("channel") else {}
    channel = ChannelModel(
        bandwidth_bps=float(chan_sec.get("bandwidth_bps", 18.88e6)),
        rtt_s=float(chan_sec.get("rtt_s", 0.0)),
    )

    run_sec = parser["run"] if parser.has_section("run") else {}
    seed = seed_override if seed_override is not None \
        else int(run_sec.get("seed", 0))

    session = SessionConfig(
        model_id=model_sec.get("id", "toy"),
        seed=seed,
        accel=accel,
        cloud_schedule=schedule,
        device_steps=int(device_steps) if device_steps else None,
        dt_shift=int(sched_sec.get("dt_shift", 0)),
        channel=channel,
    )

    lex_path = run_sec.get("lexicon")
    lexicon = AttributeLexicon.load(lex_path) if lex_path else default_lexicon()
    tpl_path = run_sec.get("templates")
    templates = load_templates(tpl_path) if tpl_path else DEFAULT_TEMPLATES

    transport_sec = parser["transport"] if parser.has_section("transport") else {}
    return RunConfig(
        model_id=session.model_id,
        model=model_cfg,
        cloud_weights=cloud,
        device_weights=device,
        session=session,
        transport_mode=transport_sec.get("mode", "simulated"),
        host=transport_sec.get("host", "127.0.0.1"),
        port=int(transport_sec.get("port", 7410)),
        out_path=run_sec.get("out", "oblix_out.ppm"),
        report_path=run_sec.get("report", "oblix_report.jsonl"),
        lexicon=lexicon,
        templates=templates,
    )


def write_ppm(image: Tensor, path: str) -> None:
    """Binary portable pixmap from a (3, H, W) image in [0, 1]."""
    arr = image.to_numpy()
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ConfigError(f"image must be (3, H, W), got {image.shape}")
    _, h, w = arr.shape
    pixels = np.clip(arr * 255.0 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(pixels.transpose(1, 2, 0).tobytes())


def _make_transport(rc: RunConfig):
    if rc.transport_mode == "simulated":
        return SimulatedTransport(Server({rc.model_id: rc.cloud_weights}))
    if rc.transport_mode == "socket":
        return SocketTransport(rc.host, rc.port)
    raise ConfigError(f"unknown transport mode {rc.transport_mode!r}")


def _run_and_report(rc: RunConfig, prompt: str, transport,
                    out_path: str | None) -> int:
    result = client_run_session(prompt, rc.session, transport,
                                rc.device_weights, rc.lexicon)
    report = counted_flops_report(result, rc.session.channel)
    out = out_path or rc.out_path
    write_ppm(result.image, out)
    with open(rc.report_path, "w", encoding="utf-8") as f:
        f.write("\n".join(report.to_lines()) + "\n")
    print(f"candidates N={result.candidates.size}")
    for note in result.notes:
        print(f"note: {note}")
    print(report.summary_table())
    print(f"image -> {out}")
    print(f"report -> {rc.report_path}")
    return 0


def cmd_generate(args) -> int:
    rc = load_run_config(args.config, args.seed)
    transport = _make_transport(rc)
    try:
        return _run_and_report(rc, args.prompt, transport, args.out)
    finally:
        transport.close()


def cmd_client(args) -> int:
    rc = load_run_config(args.config, args.seed)
    transport = SocketTransport(rc.host if args.host is None else args.host,
                                rc.port if args.port is None else args.port)
    try:
        return _run_and_report(rc, args.prompt, transport, args.out)
    finally:
        transport.close()


def cmd_serve(args) -> int:
    rc = load_run_config(args.config)
    daemon = Daemon((rc.host, rc.port), Server({rc.model_id: rc.cloud_weights}))
    host, port = daemon.server_address
    print(f"serving model {rc.model_id!r} on {host}:{port}")
    try:
        daemon.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        daemon.shutdown()
    return 0


def _parse_grid(grid: str) -> dict[str, list]:
    """Grid strings look like "k=0,5,10 N=1,2,6 reuse=0,1 r=4 s=6"."""
    axes: dict[str, list] = {}
    for part in grid.split():
        key, _, values = part.partition("=")
        if not values:
            raise ConfigError(f"grid axis {part!r} has no values")
        axes[key] = [v for v in values.split(",") if v]
    return axes


def cmd_bench(args) -> int:
    rc = load_run_config(args.config)
    axes = _parse_grid(args.grid)
    unknown = set(axes) - {"k", "r", "s", "reuse", "N"}
    if unknown:
        raise ConfigError(f"unknown grid axes {sorted(unknown)}")
    total_steps = rc.session.cloud_schedule.steps
    never = total_steps + 1
    ks = [int(v) for v in axes.get("k", [rc.session.accel.switch_point])]
    rs = [int(v) for v in axes.get("r", [rc.session.accel.cache_point])]
    ss = [int(v) for v in axes.get("s", [rc.session.accel.skip_point])]
    reuses = [v in ("1", "true", "on") for v in axes.get(
        "reuse", ["1" if rc.session.accel.reuse else "0"])]
    batches = [int(v) for v in axes.get("N", [2])]

    records = []
    for n in batches:
        if n not in BENCH_PROMPTS:
            raise ConfigError(
                f"no bench prompt for N={n}; choose from "
                f"{sorted(BENCH_PROMPTS)}")
        for k in ks:
            for r in rs:
                for s in ss:
                    for reuse in reuses:
                        accel = AccelConfig(k, min(r, never), min(s, never),
                                            reuse, rc.session.accel.refresh_period,
                                            rc.session.accel.pivot_index)
                        session = SessionConfig(
                            rc.session.model_id, rc.session.seed, accel,
                            rc.session.cloud_schedule, rc.session.device_steps,
                            rc.session.dt_shift, rc.session.channel)
                        transport = SimulatedTransport(
                            Server({rc.model_id: rc.cloud_weights}))
                        result = client_run_session(
                            BENCH_PROMPTS[n], session, transport,
                            rc.device_weights, rc.lexicon)
                        report = counted_flops_report(result, session.channel)
                        records.append({
                            "k": k, "r": r, "s": s, "reuse": reuse, "N": n,
                            "server_flops": report.server_flops,
                            "device_flops": report.device_flops,
                            "bytes_sent": report.bytes_sent,
                            "bytes_received": report.bytes_received,
                            "modeled_transfer_s": round(
                                report.modeled_transfer_s, 6),
                        })
    out = args.out or "oblix_bench.jsonl"
    with open(out, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"{len(records)} grid points -> {out}")
    return 0


def cmd_dataset(args) -> int:
    lexicon = AttributeLexicon.load(args.lexicon) if args.lexicon \
        else default_lexicon()
    templates = load_templates(args.templates) if args.templates \
        else DEFAULT_TEMPLATES
    records = generate_corpus(templates, lexicon, args.count, args.seed)
    write_corpus(records, args.out)
    print(f"{len(records)} prompts -> {args.out}")
    return 0


def cmd_attest(args) -> int:
    rc = load_run_config(args.config)
    if args.prompt:
        prompts = [args.prompt]
    elif args.corpus:
        prompts = [rec["prompt"] for rec in read_corpus(args.corpus)]
    else:
        prompts = [rec["prompt"]
                   for rec in generate_corpus(rc.templates, rc.lexicon)]

    failures = 0
    seeds = [rc.session.seed + i for i in range(args.seeds)]
    for prompt in prompts:
        for seed in seeds:
            verdict = check_indistinguishability(prompt, rc.lexicon, seed,
                                                 rc.session)
            if not verdict.passed:
                failures += 1
                print(f"FAIL {prompt!r} seed={seed}: {verdict.describe()}")
    print(f"transcript equality: {len(prompts)} prompts x {len(seeds)} seeds, "
          f"{failures} failures")

    control = check_indistinguishability(prompts[0], rc.lexicon, seeds[0],
                                         rc.session, order_real_first=True)
    if control.class_size > 1 and control.passed:
        failures += 1
        print("FAIL negative control: leaky ordering was not detected")
    else:
        print(f"negative control: {control.describe()} (expected FAIL)")

    if args.trials:
        for vary, label in ((("gender",), "N=2"),
                            (("gender", "age"), "N=6")):
            verdict = distinguisher_experiment(
                rc.lexicon, rc.session, args.trials, adversary="hash",
                templates=rc.templates, vary=vary)
            print(f"distinguisher {label}: {verdict.describe()}")
            failures += 0 if verdict.passed else 1
        sanity = distinguisher_experiment(
            rc.lexicon, rc.session, max(args.trials, 100),
            adversary=LEAKY_ADVERSARY, templates=rc.templates,
            vary=("gender",))
        print(f"leaky control: {sanity.describe()} (must be accuracy 1.0)")
        failures += 0 if sanity.passed else 1

    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oblix",
        description="oblivious cloud-device hybrid image generation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="end-to-end generation")
    gen.add_argument("--config", required=True)
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out")
    gen.set_defaults(func=cmd_generate)

    srv = sub.add_parser("serve", help="run the cloud daemon")
    srv.add_argument("--config", required=True)
    srv.set_defaults(func=cmd_serve)

    cli = sub.add_parser("client", help="generate against a remote daemon")
    cli.add_argument("--config", required=True)
    cli.add_argument("--prompt", required=True)
    cli.add_argument("--seed", type=int)
    cli.add_argument("--host")
    cli.add_argument("--port", type=int)
    cli.add_argument("--out")
    cli.set_defaults(func=cmd_client)

    ben = sub.add_parser("bench", help="cost sweep over a parameter grid")
    ben.add_argument("--config", required=True)
    ben.add_argument("--grid", required=True,
                     help='e.g. "k=0,5,10 N=1,2,6 reuse=0,1"')
    ben.add_argument("--out")
    ben.set_defaults(func=cmd_bench)

    dat = sub.add_parser("dataset", help="emit a candidate-prompt corpus")
    dat.add_argument("--templates")
    dat.add_argument("--lexicon")
    dat.add_argument("--count", type=int, default=None)
    dat.add_argument("--seed", type=int, default=0)
    dat.add_argument("--out", required=True)
    dat.set_defaults(func=cmd_dataset)

    att = sub.add_parser("attest", help="obliviousness attestation")
    att.add_argument("--config", required=True)
    att.add_argument("--prompt")
    att.add_argument("--corpus")
    att.add_argument("--seeds", type=int, default=5)
    att.add_argument("--trials", type=int, default=0)
    att.set_defaults(func=cmd_attest)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("OBLIX_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OblixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
