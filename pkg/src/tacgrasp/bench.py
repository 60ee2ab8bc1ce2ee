"""Maximum-supported-weight benchmark for grasp policies.

A standard ten-second episode grasps the object, then pours a candidate
water mass in over a fixed window. Binary search over integer grams finds
the largest added mass the policy survives; the no-adapter arm and the
trained-adapter arm run the same schedule from the same initial grasp for a
like-for-like comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import run_closed_loop
from .errors import DataError
from .sim import DisturbanceEvent, reset

EPISODE_TICKS = 1600
FILL_START_TICK = 720
FILL_DURATION_S = 2.5
BENCH_POLICIES = ("none", "trained")


@dataclass(frozen=True)
class BenchResult:
    """Supported added mass per policy arm for one object."""

    object_name: str
    seed: int
    max_grams: dict

    @property
    def improvement_pct(self) -> float:
        none = self.max_grams.get("none")
        trained = self.max_grams.get("trained")
        if none is None or trained is None:
            raise DataError("improvement needs both policy arms")
        if none == 0:
            return float("inf") if trained > 0 else 0.0
        return 100.0 * (trained - none) / none


def standard_schedule(grams: int):
    """Disturbance schedule pouring the requested mass over the fill window."""
    if grams <= 0:
        return []
    rate = grams / FILL_DURATION_S
    return [
        (FILL_START_TICK, DisturbanceEvent(kind="water", magnitude=rate, duration_s=FILL_DURATION_S))
    ]


def run_standard_episode(
    obj,
    grams: int,
    seed: int,
    generator=None,
    estimator=None,
    te=None,
    adapter=None,
    initial_theta_deg=None,
    noise: bool = True,
):
    """One benchmark episode; returns the closed-loop EpisodeResult."""
    return run_closed_loop(
        reset(obj, seed=seed),
        generator=generator,
        estimator=estimator,
        te=te,
        adapter=adapter,
        disturbances=standard_schedule(int(grams)),
        max_ticks=EPISODE_TICKS,
        noise=noise,
        initial_theta_deg=initial_theta_deg,
    )


def survives(obj, grams: int, seed: int, **models) -> bool:
    """Whether the policy holds the object for the whole standard episode."""
    return not run_standard_episode(obj, grams, seed, **models).dropped


def bench_max_weight(obj, seed: int, **models) -> int:
    """Largest integer added grams in [0, max_fill_g] the policy survives.

    Binary search keeps a surviving lower bound and a failing upper bound;
    the caller's models decide the policy arm (no adapter = passive grasp).
    """
    hi_limit = int(obj.max_fill_g)
    if not survives(obj, 0, seed, **models):
        return 0
    if survives(obj, hi_limit, seed, **models):
        return hi_limit
    lo, hi = 0, hi_limit  # survives(lo), fails(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if survives(obj, mid, seed, **models):
            lo = mid
        else:
            hi = mid
    return lo


def bench_compare(
    objects,
    seed: int,
    generator,
    estimator=None,
    te=None,
    adapter=None,
    policies=BENCH_POLICIES,
    noise: bool = True,
):
    """Benchmark each object under the requested policy arms.

    Both arms share the generator (identical initial grasp); only the
    trained arm wires the estimator-gated adapter.
    """
    results = []
    for obj in objects:
        grams = {}
        for policy in policies:
            if policy == "none":
                grams[policy] = bench_max_weight(
                    obj, seed, generator=generator, noise=noise
                )
            elif policy == "trained":
                if adapter is None or estimator is None or te is None:
                    raise DataError(
                        "the trained policy arm needs an estimator, te, and adapter"
                    )
                grams[policy] = bench_max_weight(
                    obj,
                    seed,
                    generator=generator,
                    estimator=estimator,
                    te=te,
                    adapter=adapter,
                    noise=noise,
                )
            else:
                raise DataError(f"unknown policy arm {policy!r}")
        results.append(BenchResult(object_name=obj.name, seed=seed, max_grams=grams))
    return results


def write_bench_table(path, results) -> None:
    """Tab-separated benchmark table, one object per row."""
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    have_both = all(
        "none" in r.max_grams and "trained" in r.max_grams for r in results
    )
    header = ["object"] + [p for p in BENCH_POLICIES if any(p in r.max_grams for r in results)]
    if have_both:
        header.append("improvement_pct")
    lines = ["\t".join(header)]
    for r in results:
        row = [r.object_name]
        for p in BENCH_POLICIES:
            if p in header:
                row.append(str(r.max_grams[p]))
        if have_both:
            row.append(f"{r.improvement_pct:.9g}")
        lines.append("\t".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def mean_improvement_pct(results) -> float:
    """Mean relative improvement of the trained arm across objects."""
    vals = [r.improvement_pct for r in results]
    finite = [v for v in vals if np.isfinite(v)]
    if not finite:
        raise DataError("no finite improvements to average")
    return float(np.mean(finite))
