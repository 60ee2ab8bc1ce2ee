"""Tests for the supported-weight benchmark against a slip-law oracle."""

import math

import numpy as np
import pytest

from tacgrasp.adapter import init_adapter, AdapterModel
from tacgrasp.bench import (
    BENCH_POLICIES,
    BenchResult,
    EPISODE_TICKS,
    FILL_DURATION_S,
    FILL_START_TICK,
    bench_compare,
    bench_max_weight,
    mean_improvement_pct,
    run_standard_episode,
    standard_schedule,
    survives,
    write_bench_table,
)
from tacgrasp.catalog import load_catalog
from tacgrasp.errors import DataError
from tacgrasp.stability import GmmModel

CATALOG = load_catalog()


def grasp_angle_for_capacity(obj, capacity_n: float) -> float:
    force = capacity_n / (2.0 * obj.mu)
    aperture = obj.width_mm - force / obj.stiffness_n_per_mm
    return 90.0 * (1.0 - aperture / 80.0)


def constant_policy_model(delta: float) -> AdapterModel:
    model = init_adapter(seed=0)
    params = {k: np.zeros_like(v) for k, v in model.params.items()}
    params["head0_b"] = np.ones_like(params["head0_b"])
    params["head1_w"] = np.full_like(params["head1_w"], delta / len(params["head0_b"]))
    config = dict(model.config)
    config["trained"] = True
    return AdapterModel(params=params, config=config)


def far_estimator(d=40) -> GmmModel:
    return GmmModel(
        weights=np.array([1.0]),
        means=np.full((1, d), 1e9),
        chols=(np.eye(d),),
        reg_eps=0.0,
        ll_history=np.array([0.0]),
    )


def oracle_survives(mass_g, width_mm, mu, stiffness, max_fill_g, theta0, grams):
    """Tick replay of the published slip law, independent of the simulator.

    Gripper: aperture = 80(1 - theta/90) mm, slew 0.1875 deg/tick toward the
    target, force min(40, stiffness * overlap), capacity 2*mu*force. Load is
    (mass+fill)*9.81/1000 with water poured at grams/2.5 g/s over ticks
    [721, 1121). Slip grows 0.5*(W-C) mm per contact tick with W > C; the
    object drops past 40 mm of slip or on contact loss under load.
    """
    theta, target = 0.0, 90.0
    commanded = False
    fill = slip = 0.0
    ever = False
    fill_lo, fill_hi = FILL_START_TICK + 1, FILL_START_TICK + 1 + int(
        math.ceil(FILL_DURATION_S * 160)
    )
    for t_new in range(1, EPISODE_TICKS + 1):
        force_prev = min(40.0, stiffness * max(0.0, width_mm - 80.0 * (1.0 - theta / 90.0)))
        if not commanded and force_prev > 0.0:
            target = min(90.0, max(0.0, theta0))
            commanded = True
        diff = target - theta
        theta = target if abs(diff) <= 0.1875 else theta + math.copysign(0.1875, diff)
        aperture = 80.0 * (1.0 - theta / 90.0)
        force = min(40.0, stiffness * max(0.0, width_mm - aperture))
        in_contact = force > 0.0
        if grams > 0 and fill_lo <= t_new < fill_hi:
            fill = min(max_fill_g, fill + (grams / FILL_DURATION_S) / 160.0)
        w = (mass_g + fill) * 9.81 / 1000.0
        capacity = 2.0 * mu * force
        if in_contact and w > capacity:
            slip += 0.5 * (w - capacity)
        if (ever and not in_contact and w > 0.0) or slip > 40.0:
            return False
        ever = ever or in_contact
    return True


def oracle_max_grams(obj, theta0) -> int:
    best = 0
    for grams in range(int(obj.max_fill_g) + 1):
        if oracle_survives(
            obj.mass_g, obj.width_mm, obj.mu, obj.stiffness_n_per_mm,
            obj.max_fill_g, theta0, grams,
        ):
            best = grams
    return best


class TestSchedule:
    def test_zero_grams_empty(self):
        assert standard_schedule(0) == []

    def test_rate_covers_mass(self):
        (at, event), = standard_schedule(10)
        assert at == FILL_START_TICK
        assert event.kind == "water"
        assert event.magnitude * event.duration_s == pytest.approx(10.0)


class TestAgainstOracle:
    @pytest.mark.parametrize("name", ["soda_can", "pill_box"])
    def test_passive_arm_matches_slip_law_oracle(self, name):
        obj = CATALOG[name]
        theta0 = grasp_angle_for_capacity(obj, 1.5 * obj.mass_g * 9.81 / 1000.0)
        measured = bench_max_weight(obj, seed=50, initial_theta_deg=theta0, noise=False)
        expected = oracle_max_grams(obj, theta0)
        assert abs(measured - expected) <= 2
        # Static capacity supports at least half the object mass again.
        assert measured >= math.floor(0.5 * obj.mass_g) - 1

    def test_binary_search_matches_linear_scan(self):
        obj = CATALOG["pill_box"]
        theta0 = grasp_angle_for_capacity(obj, 1.5 * obj.mass_g * 9.81 / 1000.0)
        measured = bench_max_weight(obj, seed=51, initial_theta_deg=theta0)
        scan = 0
        for grams in range(int(obj.max_fill_g) + 1):
            if survives(obj, grams, seed=51, initial_theta_deg=theta0):
                scan = grams
        assert abs(measured - scan) <= 1

    def test_weak_grasp_supports_nothing(self):
        obj = CATALOG["soda_can"]
        theta0 = grasp_angle_for_capacity(obj, 0.5 * obj.mass_g * 9.81 / 1000.0)
        assert bench_max_weight(obj, seed=52, initial_theta_deg=theta0) == 0

    def test_strong_grasp_supports_full_range(self):
        obj = CATALOG["soda_can"]
        assert bench_max_weight(obj, seed=53, initial_theta_deg=90.0) == int(obj.max_fill_g)

    def test_deterministic(self):
        obj = CATALOG["pill_box"]
        theta0 = grasp_angle_for_capacity(obj, 1.3 * obj.mass_g * 9.81 / 1000.0)
        a = bench_max_weight(obj, seed=54, initial_theta_deg=theta0)
        b = bench_max_weight(obj, seed=54, initial_theta_deg=theta0)
        assert a == b


class TestComparison:
    def test_adapter_arm_supports_more(self):
        obj = CATALOG["soda_can"]
        theta0 = grasp_angle_for_capacity(obj, 1.2 * obj.mass_g * 9.81 / 1000.0)
        none_arm = bench_max_weight(obj, seed=55, initial_theta_deg=theta0)
        trained_arm = bench_max_weight(
            obj,
            seed=55,
            initial_theta_deg=theta0,
            estimator=far_estimator(),
            te=1e-300,
            adapter=constant_policy_model(2.0),
        )
        assert trained_arm > none_arm

    def test_compare_requires_trained_models(self):
        obj = CATALOG["pill_box"]
        with pytest.raises(DataError):
            bench_compare([obj], seed=56, generator=None, policies=("trained",))

    def test_episode_grasp_identical_across_arms(self):
        obj = CATALOG["jam_jar"]
        theta0 = grasp_angle_for_capacity(obj, 1.5 * obj.mass_g * 9.81 / 1000.0)
        passive = run_standard_episode(obj, 20, seed=57, initial_theta_deg=theta0)
        adaptive = run_standard_episode(
            obj, 20, seed=57, initial_theta_deg=theta0,
            estimator=far_estimator(), te=1e-300,
            adapter=constant_policy_model(0.0),
        )
        assert np.array_equal(passive.theta_deg, adaptive.theta_deg)


class TestReporting:
    def test_improvement_pct(self):
        r = BenchResult(object_name="x", seed=0, max_grams={"none": 50, "trained": 75})
        assert r.improvement_pct == pytest.approx(50.0)

    def test_improvement_from_zero(self):
        r = BenchResult(object_name="x", seed=0, max_grams={"none": 0, "trained": 10})
        assert math.isinf(r.improvement_pct)

    def test_mean_improvement_skips_infinite(self):
        rs = [
            BenchResult(object_name="a", seed=0, max_grams={"none": 50, "trained": 75}),
            BenchResult(object_name="b", seed=0, max_grams={"none": 0, "trained": 10}),
            BenchResult(object_name="c", seed=0, max_grams={"none": 40, "trained": 44}),
        ]
        assert mean_improvement_pct(rs) == pytest.approx((50.0 + 10.0) / 2.0)

    def test_mean_improvement_needs_finite(self):
        rs = [BenchResult(object_name="a", seed=0, max_grams={"none": 0, "trained": 1})]
        with pytest.raises(DataError):
            mean_improvement_pct(rs)

    def test_table_file(self, tmp_path):
        rs = [
            BenchResult(object_name="a", seed=0, max_grams={"none": 50, "trained": 75}),
            BenchResult(object_name="b", seed=0, max_grams={"none": 20, "trained": 30}),
        ]
        path = tmp_path / "bench.tsv"
        write_bench_table(path, rs)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "object\tnone\ttrained\timprovement_pct"
        assert lines[1] == "a\t50\t75\t50"
        assert len(lines) == 3

    def test_table_single_arm(self, tmp_path):
        rs = [BenchResult(object_name="a", seed=0, max_grams={"none": 50})]
        path = tmp_path / "bench.tsv"
        write_bench_table(path, rs)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "object\tnone"
        assert lines[1] == "a\t50"
