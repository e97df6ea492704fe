"""Server-side acceleration gates and their session state.

Three independent mechanisms, all pure functions of the iteration index
and the config:

* attention cache: a site recomputes at iterations t <= cache_point and at
  refresh iterations (t mod refresh_period == 0); otherwise it serves the
  cached output written by the last recompute.
* block skip: from iteration skip_point onward the down and mid blocks are
  not executed and the cached mid-block features feed the up block.
* batch reuse: at iterations up to the cache point, the attention map is
  computed once for the pivot batch row and broadcast; per-row value
  projections stay individual.

Composition order when several gates apply at one step: skip removes the
down/mid sites entirely, then the cache gate runs per surviving site, then
reuse shapes how a recomputation is performed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .errors import ConfigError, SessionError
from .tensor import Tensor, flops_tag, matmul, scale, softmax_rows, stack_rows

log = logging.getLogger("oblix.accel")


def never(total_steps: int) -> int:
    """Gate threshold meaning "never fires" for a run of total_steps."""
    return total_steps + 1


@dataclass(frozen=True)
class AccelConfig:
    """Gate parameters for one generation session.

    ``switch_point`` is the number of iterations run on the cloud; the
    gates themselves only read ``cache_point``, ``skip_point`` and the
    reuse fields.
    """

    switch_point: int = 0
    cache_point: int = 10**9
    skip_point: int = 10**9
    reuse: bool = False
    refresh_period: int = 5
    pivot_index: int = 0

    def __post_init__(self):
        if self.switch_point < 0:
            raise ConfigError(f"switch_point must be >= 0, got {self.switch_point}")
        if self.cache_point < 1 or self.skip_point < 1:
            raise ConfigError("cache_point and skip_point must be >= 1")
        if self.refresh_period < 1:
            raise ConfigError(f"refresh_period must be >= 1, got {self.refresh_period}")
        if self.pivot_index < 0:
            raise ConfigError(f"pivot_index must be >= 0, got {self.pivot_index}")


def should_recompute_attention(t: int, cfg: AccelConfig) -> bool:
    """True when attention must be computed fresh at iteration t.

    False means the site returns its cached output.
    """
    if t < 1:
        raise ConfigError(f"iteration index must be >= 1, got {t}")
    return t <= cfg.cache_point or t % cfg.refresh_period == 0


def should_skip_blocks(t: int, cfg: AccelConfig) -> bool:
    """True when the down and mid blocks are skipped at iteration t.

    A skip needs cached mid-block features, which only exist after some
    earlier full step; skip_point == 1 would fire before any exist, so it
    is refused with a diagnostic instead of raised.
    """
    if t < 1:
        raise ConfigError(f"iteration index must be >= 1, got {t}")
    if cfg.skip_point == 1:
        log.warning("skip_point=1 would skip before any mid-block features "
                    "are cached; treating as never")
        return False
    return t >= cfg.skip_point


def reuse_active(t: int, cfg: AccelConfig) -> bool:
    """Batch reuse applies only before the cache gate takes over."""
    return cfg.reuse and t <= cfg.cache_point


@dataclass
class AccelState:
    """Per-session caches written by the denoiser as gates fire.

    ``cached_attention`` maps a site id to the per-row outputs written by
    the last recomputation; ``mid_features`` holds the per-row mid-block
    outputs of the last unskipped step.  ``cache_writes`` records
    (iteration, site) for every overwrite so refresh behaviour is
    observable in tests.
    """

    cfg: AccelConfig
    session_id: str = "local"
    cached_attention: dict[str, list[Tensor]] = field(default_factory=dict)
    mid_features: list[Tensor] | None = None
    last_refresh: dict[str, int] = field(default_factory=dict)
    cache_writes: list[tuple[int, str]] = field(default_factory=list)
    _bound: tuple[int, int] | None = None

    def bind(self, weights_key: int, batch: int) -> None:
        if self._bound is None:
            self._bound = (weights_key, batch)
        elif self._bound != (weights_key, batch):
            raise SessionError(
                "accel state belongs to a different session "
                f"(bound {self._bound}, got {(weights_key, batch)})"
            )

    def store_attention(self, site: str, t: int, rows: list[Tensor]) -> None:
        self.cached_attention[site] = rows
        self.last_refresh[site] = t
        self.cache_writes.append((t, site))

    def load_attention(self, site: str) -> list[Tensor]:
        if site not in self.cached_attention:
            raise SessionError(f"no cached attention output for site {site!r}")
        return self.cached_attention[site]


def reuse_attention_batch(q_inputs: Tensor, kv_inputs: Tensor, w, cfg: AccelConfig,
                          site: str) -> Tensor:
    """Pivot-map attention over a batch.

    ``q_inputs`` is (N, S, d_q) and ``kv_inputs`` is (N, S_kv, d_kv); ``w``
    exposes ``attn(site)`` with ``wq``/``wk``/``wv`` projections.  The
    query, key and softmax run once on the pivot row; value projections
    and the map-times-value product run per row.
    """
    n = q_inputs.shape[0]
    if kv_inputs.shape[0] != n:
        raise ConfigError(
            f"batch sizes differ: {q_inputs.shape[0]} queries, "
            f"{kv_inputs.shape[0]} key/value rows"
        )
    rows = reuse_attention_rows(
        [q_inputs.row(i) for i in range(n)],
        [kv_inputs.row(i) for i in range(n)],
        w, cfg, site,
    )
    return stack_rows(rows)


def reuse_attention_rows(q_rows: list[Tensor], kv_rows: list[Tensor], w,
                         cfg: AccelConfig, site: str) -> list[Tensor]:
    n = len(q_rows)
    if cfg.pivot_index >= n:
        raise ConfigError(
            f"pivot_index {cfg.pivot_index} outside batch of {n}"
        )
    params = w.attn(site)
    width = params.wq.shape[1]
    pivot = cfg.pivot_index
    with flops_tag(f"{site}/map"):
        q_pivot = matmul(q_rows[pivot], params.wq)
        k_pivot = matmul(kv_rows[pivot], params.wk)
        scores = scale(matmul(q_pivot, k_pivot.transpose2d()),
                       1.0 / math.sqrt(width))
        pivot_map = softmax_rows(scores)
    out: list[Tensor] = []
    with flops_tag(f"{site}/value"):
        for kv in kv_rows:
            values = matmul(kv, params.wv)
            out.append(matmul(pivot_map, values))
    return out
