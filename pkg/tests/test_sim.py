import json

import pytest

from dmap import sim
from dmap.crypto import KEYED_HASH, verify_certificate
from dmap.sim import ConfigError, Delivery, ScenarioConfig, World, load_scenario
from dmap.txmodel import ROAD_DAMAGE, GeoPoint, build_data_tx
from tests.conftest import SCENARIO_NAMES, load_scenario_config
from tests.test_txmodel import key

scheme = KEYED_HASH


def minimal_dict(**overrides):
    d = {
        "seed": 1,
        "grid": {"rows": 2, "cols": 2, "cell_size_m": 500.0},
        "vehicles": {"count": 4, "speed_min_mps": 5.0, "speed_max_mps": 15.0},
        "duration_ms": 10_000,
        "window_ms": 5000,
        "consistency": {"eps_distance_m": 50.0, "eps_time_ms": 2000,
                        "min_corroboration": 2},
    }
    d.update(overrides)
    return d


class TestScenarioConfig:
    def test_from_dict_minimal(self):
        cfg = ScenarioConfig.from_dict(minimal_dict())
        assert cfg.rows == 2 and cfg.cols == 2
        assert cfg.miner_m == 2  # default

    def test_adversary_fraction_out_of_range(self):
        bad = minimal_dict(adversary={"fraction": 1.5})
        with pytest.raises(ConfigError) as exc:
            ScenarioConfig.from_dict(bad)
        assert exc.value.field == "adversary.fraction"

    def test_missing_grid_names_field(self):
        d = minimal_dict()
        del d["grid"]
        with pytest.raises(ConfigError) as exc:
            ScenarioConfig.from_dict(d)
        assert exc.value.field == "grid"

    def test_window_not_tick_aligned(self):
        with pytest.raises(ConfigError) as exc:
            ScenarioConfig.from_dict(minimal_dict(window_ms=5050))
        assert exc.value.field == "window_ms"

    def test_min_corroboration_below_two(self):
        d = minimal_dict()
        d["consistency"]["min_corroboration"] = 1
        with pytest.raises(ConfigError) as exc:
            ScenarioConfig.from_dict(d)
        assert exc.value.field == "consistency.min_corroboration"

    def test_fabricate_needs_kind_and_loc(self):
        bad = minimal_dict(adversary={"fraction": 0.5,
                                      "strategy": {"type": "FabricateEvent"}})
        with pytest.raises(ConfigError) as exc:
            ScenarioConfig.from_dict(bad)
        assert exc.value.field == "adversary.strategy"

    def test_unknown_key_reuse_vehicle(self):
        with pytest.raises(ConfigError) as exc:
            ScenarioConfig.from_dict(minimal_dict(key_reuse_vehicles=[99]))
        assert exc.value.field == "key_reuse_vehicles"

    @pytest.mark.parametrize("name", SCENARIO_NAMES)
    def test_bundled_scenarios_round_trip(self, name):
        cfg = load_scenario_config(name)
        again = ScenarioConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()

    def test_to_dict_is_json_serializable(self):
        cfg = load_scenario_config("majority_capture")
        json.dumps(cfg.to_dict())


class TestWorldConstruction:
    def test_grid_yields_one_ledger_and_directory_per_region(self):
        world = load_scenario(ScenarioConfig.from_dict(minimal_dict()))
        assert sorted(world.ledgers) == ["r0_c0", "r0_c1", "r1_c0", "r1_c1"]
        assert sorted(world.rule_table.directories) == sorted(world.ledgers)

    def test_every_rsi_certified_under_the_ca(self):
        world = load_scenario(ScenarioConfig.from_dict(minimal_dict()))
        for region, rsi in world.rsis.items():
            cert = world.policy.cert_registry[rsi.key.public]
            assert cert.region_id == region
            assert verify_certificate(scheme, world.ca.public, cert)

    def test_adversary_count_rounds(self):
        d = minimal_dict(adversary={
            "fraction": 0.5,
            "strategy": {"type": "FabricateEvent", "kind": "RoadDamage",
                         "loc": {"lat": 0.001, "lon": 0.001}}})
        world = load_scenario(ScenarioConfig.from_dict(d))
        assert sum(not v.honest for v in world.vehicles) == 2

    def test_vehicles_start_inside_grid(self):
        world = load_scenario(ScenarioConfig.from_dict(minimal_dict()))
        for v in world.vehicles:
            assert 0 <= v.x <= 1000 and 0 <= v.y <= 1000
            assert v.assoc_region in world.rsis


class TestDeterminism:
    def test_identical_seeds_identical_metrics(self):
        cfg = load_scenario_config("honest_majority")
        m1 = load_scenario(cfg).run()
        m2 = load_scenario(cfg).run()
        assert sim.metrics_to_json(m1) == sim.metrics_to_json(m2)

    def test_state_digest_tracks_step_by_step(self):
        cfg = load_scenario_config("honest_majority")
        a, b = load_scenario(cfg), load_scenario(cfg)
        for _ in range(120):
            a.step()
            b.step()
            assert a.state_digest() == b.state_digest()

    def test_different_seed_different_trajectory(self):
        cfg = load_scenario_config("honest_majority")
        other = ScenarioConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + 1})
        a, b = load_scenario(cfg), load_scenario(other)
        assert a.state_digest() != b.state_digest()


class TestScenarioOutcomes:
    def test_honest_majority_blocks_all_fabrication(self, finished_worlds):
        _, metrics = finished_worlds["honest_majority"]
        g = metrics["global"]
        assert g["false_data_injected"] > 0
        assert g["false_data_chained"] == 0
        assert g["detection_rate"] == 1.0

    def test_majority_capture_admits_false_data(self, finished_worlds):
        _, metrics = finished_worlds["majority_capture"]
        g = metrics["global"]
        assert g["false_data_chained"] > 0
        assert g["detection_rate"] < 1.0

    def test_market_suite_grants_and_denies(self, finished_worlds):
        _, metrics = finished_worlds["market_suite"]
        g = metrics["global"]
        assert g["access_granted"] > 0
        assert g["access_denied"] > 0
        assert g["unauthorized_served"] == 0

    def test_key_reuse_is_flagged(self, finished_worlds):
        _, metrics = finished_worlds["key_reuse"]
        assert metrics["global"]["linkability_violations"] > 0

    def test_fresh_keys_leave_no_linkability(self, finished_worlds):
        for name in ("honest_majority", "majority_capture", "market_suite"):
            _, metrics = finished_worlds[name]
            assert metrics["global"]["linkability_violations"] == 0, name

    def test_all_invariants_pass_in_every_scenario(self, finished_worlds):
        for name, (world, _) in finished_worlds.items():
            for inv, status in world.invariant_results.items():
                assert status == "ok", f"{name}: {inv}"

    def test_per_region_stats_cover_every_region(self, finished_worlds):
        world, metrics = finished_worlds["honest_majority"]
        assert sorted(metrics["per_region"]) == sorted(world.ledgers)


class TestLinkabilityDetector:
    def make_world(self):
        return load_scenario(ScenarioConfig.from_dict(minimal_dict()))

    def deliver(self, world, vid, keypair, ts):
        tx = build_data_tx(scheme, keypair, GeoPoint(1000, 1000),
                           ROAD_DAMAGE, ts)
        world.pk_owner.setdefault(tx.pk, vid)
        world.delivery_log.append(Delivery(0, "r0_c0", vid, tx, False))

    def test_reused_key_counts_extra_uses(self):
        world = self.make_world()
        k = key("reused")
        for ts in (0, 100, 200):
            self.deliver(world, 0, k, ts)
        link = world.compute_linkability()
        assert link["linkability_violations"] == 2
        assert link["per_vehicle"] == {"0": 2}

    def test_fresh_keys_count_nothing(self):
        world = self.make_world()
        for i in range(5):
            self.deliver(world, 0, key(f"fresh{i}"), i * 100)
        assert world.compute_linkability()["linkability_violations"] == 0

    def test_distinct_vehicles_never_cross_count(self):
        world = self.make_world()
        self.deliver(world, 0, key("v0-key"), 0)
        self.deliver(world, 1, key("v1-key"), 0)
        assert world.compute_linkability()["linkability_violations"] == 0


class TestConservation:
    def test_every_delivered_report_is_accounted_for(self, finished_worlds):
        for name, (world, metrics) in finished_worlds.items():
            for region, stats in metrics["per_region"].items():
                consumed = (stats["trusted_members"] + stats["lone_members"]
                            + stats["rejected_reports"] + stats["sig_rejects"]
                            + stats["stale"]
                            + len(world.rsis[region].window.reports))
                assert stats["reports_sent"] == consumed, (name, region)


class TestHandover:
    def test_moving_vehicles_hand_over_and_reassociate(self):
        d = minimal_dict(duration_ms=30_000)
        d["vehicles"] = {"count": 10, "speed_min_mps": 20.0,
                         "speed_max_mps": 30.0}
        world = load_scenario(ScenarioConfig.from_dict(d))
        world.run()
        assert world.handover_count > 0
        # after every boundary, association matches physical region or is
        # one window behind via a pending handover
        for v in world.vehicles:
            assert v.assoc_region in world.rsis
