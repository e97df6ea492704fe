"""Cost accounting: closed-form estimators and instrumented reports.

Two tiers, deliberately separate:

* the closed-form estimators reproduce published cost arithmetic from
  per-image FLOPs figures (server cost scales with the cloud share k/T and
  the candidate count, device cost with the remaining share);
* the step-level formulas below restate the toy denoiser's op inventory
  from its configuration alone, so tests can assert integer equality
  against the instrumented counter without sharing any code path with it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .denoiser import ModelConfig
from .errors import ConfigError
from .protocol import ChannelModel, SessionResult, simulate_transfer
from .tensor import StepCost


def estimate_server_flops(full_per_image: float, k: int, total_steps: int,
                          batch: int) -> float:
    """Cloud cost for k of total_steps steps over a batch of candidates."""
    if not 0 <= k <= total_steps:
        raise ConfigError(f"need 0 <= k <= {total_steps}, got {k}")
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    return full_per_image * (k / total_steps) * batch


def estimate_device_flops(device_full_per_image: float, k: int,
                          total_steps: int) -> float:
    """Device cost for the remaining total_steps - k steps of one image."""
    if not 0 <= k <= total_steps:
        raise ConfigError(f"need 0 <= k <= {total_steps}, got {k}")
    return device_full_per_image * ((total_steps - k) / total_steps)


def transmission_bytes(res: int, batch: int, elem_bytes: int = 2) -> int:
    """Latent hand-off size: 4 * res * res * batch values."""
    if res < 1 or batch < 1:
        raise ConfigError("res and batch must be >= 1")
    return 4 * res * res * batch * elem_bytes


# ---------------------------------------------------------------------------
# Closed-form step inventory for the toy model
# ---------------------------------------------------------------------------

SELF_SITES = ("down.self", "mid.self", "up.self")
CROSS_SITES = ("down.cross", "mid.cross", "up.cross")
UP_SITES = ("up.self", "up.cross")


def _is_cross(site: str) -> bool:
    return site.endswith("cross")


def attention_map_flops(cfg: ModelConfig, site: str) -> int:
    """Query/key projections, scores, scaling and softmax for one row."""
    s, d = cfg.tokens, cfg.width
    s_kv, d_kv = (cfg.token_capacity, cfg.d_text) if _is_cross(site) else (s, d)
    return 2 * s * d * d + 2 * s_kv * d_kv * d + 2 * s * d * s_kv \
        + s * s_kv + 5 * s * s_kv


def attention_value_flops(cfg: ModelConfig, site: str) -> int:
    """Value projection and map-times-value product for one row."""
    s, d = cfg.tokens, cfg.width
    s_kv, d_kv = (cfg.token_capacity, cfg.d_text) if _is_cross(site) else (s, d)
    return 2 * s_kv * d_kv * d + 2 * s * s_kv * d


def attention_proj_flops(cfg: ModelConfig) -> int:
    """Output projection, its bias, and the residual add for one row."""
    s, d = cfg.tokens, cfg.width
    return 2 * s * d * d + 2 * s * d


def _base_flops(cfg: ModelConfig) -> int:
    s, c, d = cfg.tokens, cfg.channels, cfg.width
    return 2 * s * c * d + 2 * s * d          # input projection, bias, time add


def _down_block_flops(cfg: ModelConfig) -> int:
    s, d = cfg.tokens, cfg.width
    return 2 * s * s * d + 2 * s * d * d + 2 * s * d


def _mid_block_flops(cfg: ModelConfig) -> int:
    s, d = cfg.tokens, cfg.width
    return 2 * s * d * d + 2 * s * d


def _up_block_flops(cfg: ModelConfig) -> int:
    s, d = cfg.tokens, cfg.width
    return s * d + 2 * s * s * d + 2 * s * d * d + 2 * s * d


def _out_flops(cfg: ModelConfig) -> int:
    s, c, d = cfg.tokens, cfg.channels, cfg.width
    return 2 * s * d * c + s * c


def _sampler_flops(cfg: ModelConfig) -> int:
    return 6 * cfg.channels * cfg.tokens


def step_flops(cfg: ModelConfig, batch: int, *, recompute: bool = True,
               reuse: bool = False, skip: bool = False) -> int:
    """Expected counted FLOPs for one denoising step of the toy model."""
    sites = UP_SITES if skip else SELF_SITES + CROSS_SITES
    per_row = _base_flops(cfg) + _up_block_flops(cfg) + _out_flops(cfg) \
        + _sampler_flops(cfg) + len(sites) * attention_proj_flops(cfg)
    if not skip:
        per_row += _down_block_flops(cfg) + _mid_block_flops(cfg)
    total = batch * per_row
    for site in sites:
        if not recompute:
            continue
        if reuse and batch > 1:
            total += attention_map_flops(cfg, site) \
                + batch * attention_value_flops(cfg, site)
        else:
            total += batch * (attention_map_flops(cfg, site)
                              + attention_value_flops(cfg, site))
    return total


def expected_run_flops(cfg: ModelConfig, batch: int, accel, first_iter: int,
                       last_iter: int) -> int:
    """Closed-form total for a run, mirroring the gate schedule.

    ``accel`` is an AccelConfig or None (gates absent).
    """
    from . import accel as accel_mod

    total = 0
    for t in range(first_iter, last_iter + 1):
        if accel is None:
            total += step_flops(cfg, batch)
        else:
            total += step_flops(
                cfg, batch,
                recompute=accel_mod.should_recompute_attention(t, accel),
                reuse=accel_mod.reuse_active(t, accel) and batch > 1,
                skip=accel_mod.should_skip_blocks(t, accel),
            )
    return total


# ---------------------------------------------------------------------------
# Instrumented session report
# ---------------------------------------------------------------------------


@dataclass
class CostReport:
    server_flops: int
    device_flops: int
    server_steps: list[StepCost] = field(default_factory=list)
    device_steps: list[StepCost] = field(default_factory=list)
    bytes_sent: int = 0
    bytes_received: int = 0
    modeled_transfer_s: float = 0.0
    notes: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.server_flops != sum(s.flops for s in self.server_steps):
            raise ConfigError("server total diverges from its step series")
        if self.device_flops != sum(s.flops for s in self.device_steps):
            raise ConfigError("device total diverges from its step series")

    def to_lines(self) -> list[str]:
        head = {
            "server_flops": self.server_flops,
            "device_flops": self.device_flops,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "modeled_transfer_s": round(self.modeled_transfer_s, 6),
            "notes": self.notes,
        }
        lines = [json.dumps({"record": "summary", **head}, sort_keys=True)]
        for side, series in (("server", self.server_steps),
                             ("device", self.device_steps)):
            for sc in series:
                lines.append(json.dumps({
                    "record": "step", "side": side, "step": sc.index,
                    "flops": sc.flops, "recompute": sc.recompute,
                    "skip": sc.skip, "reuse": sc.reuse,
                }, sort_keys=True))
        return lines

    def summary_table(self) -> str:
        rows = [f"{'side':<8}{'step':>6}{'flops':>14}  gates"]
        for side, series in (("server", self.server_steps),
                             ("device", self.device_steps)):
            for sc in series:
                gates = "".join([
                    "C" if not sc.recompute else "-",
                    "S" if sc.skip else "-",
                    "R" if sc.reuse else "-",
                ])
                rows.append(f"{side:<8}{sc.index:>6}{sc.flops:>14}  {gates}")
        rows.append(f"{'total':<8}{'':>6}"
                    f"{self.server_flops + self.device_flops:>14}")
        return "\n".join(rows)


def counted_flops_report(result: SessionResult,
                         channel: ChannelModel | None = None) -> CostReport:
    """Assemble the cost report for a completed client session."""
    modeled = 0.0
    if channel is not None and result.transcript:
        total_bytes = result.bytes_sent + result.bytes_received
        modeled = simulate_transfer(total_bytes, channel)
    report = CostReport(
        server_flops=result.server_flops,
        device_flops=result.device_counter.total,
        server_steps=list(result.server_steps),
        device_steps=list(result.device_counter.steps),
        bytes_sent=result.bytes_sent,
        bytes_received=result.bytes_received,
        modeled_transfer_s=modeled,
        notes=list(result.notes),
    )
    report.validate()
    return report
