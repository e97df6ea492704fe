#!/usr/bin/env python3
"""Full obliviousness attestation over the generated template corpus.

Checks bitwise transcript equality for every corpus prompt across several
seeds, runs the broken-ordering negative control, and finishes with the
empirical distinguisher at class sizes 2 and 6.

Usage: python scripts/attest_corpus.py [--seeds 5] [--trials 1000]
"""

import argparse
import sys
import time

from oblix.accel import AccelConfig, never
from oblix.oblivious import DEFAULT_TEMPLATES, default_lexicon, generate_corpus
from oblix.protocol import ScheduleParams, SessionConfig
from oblix.security import (
    LEAKY_ADVERSARY,
    check_indistinguishability,
    distinguisher_experiment,
)


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--trials", type=int, default=1000)
    args = parser.parse_args()

    lex = default_lexicon()
    cfg = SessionConfig(
        model_id="toy", seed=0,
        accel=AccelConfig(switch_point=10, cache_point=never(25),
                          skip_point=never(25)),
        cloud_schedule=ScheduleParams(25))

    corpus = generate_corpus(DEFAULT_TEMPLATES, lex)
    started = time.time()
    failures = 0
    for rec in corpus:
        for seed in range(args.seeds):
            verdict = check_indistinguishability(rec["prompt"], lex, seed, cfg)
            if not verdict.passed:
                failures += 1
                print(f"FAIL {rec['prompt']!r} seed={seed}: "
                      f"{verdict.describe()}")
    print(f"transcript equality: {len(corpus)} prompts x {args.seeds} seeds "
          f"in {time.time() - started:.1f}s, {failures} failures")

    control = check_indistinguishability(corpus[0]["prompt"], lex, 0, cfg,
                                         order_real_first=True)
    print(f"negative control (leaky ordering): {control.describe()} "
          f"(expected FAIL)")
    if control.passed:
        failures += 1

    for vary, label in ((("gender",), 2), (("gender", "age"), 6)):
        verdict = distinguisher_experiment(lex, cfg, args.trials,
                                           adversary="hash", vary=vary)
        print(f"distinguisher N={label}: {verdict.describe()}")
        failures += 0 if verdict.passed else 1

    sanity = distinguisher_experiment(lex, cfg, max(args.trials, 100),
                                      adversary=LEAKY_ADVERSARY,
                                      vary=("gender",))
    print(f"leaky-adversary sanity check: {sanity.describe()}")
    failures += 0 if sanity.passed else 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
