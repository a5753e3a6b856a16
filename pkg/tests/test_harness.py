import math

import pytest

from rpquorum.harness import (
    ABSENT_CAVEAT, REVOCATION_CAVEAT, AuditReport, Censor, Cluster, Poison, Scheduler, Split,
    TrafficParams, VirtualClock, audit, classify, format_size, metrics_csv, node_address,
    parse_size, run_cluster, start_loopback_cluster, traffic_extrapolation, verify_presence, wait_for,
)
from rpquorum.model import ConsensusConfig, VrpSet, parse_vrp_file, roa, serialize_vrp_file
from rpquorum.service import InMemoryNetwork, NodeService, WallClock
from rpquorum.sim import ScenarioConfig, build_tree, get_scenario

R1, R2, R3 = roa(1, "10.0.0.0/8"), roa(2, "11.0.0.0/8"), roa(3, "12.0.0.0/8")


def vrps(*r):
    return VrpSet(roas=frozenset(r))


class TestScheduler:
    def test_time_then_priority_then_insertion(self):
        clock = VirtualClock()
        sched = Scheduler(clock)
        order = []
        sched.at(5, lambda: order.append("tick"), priority=1)
        sched.at(5, lambda: order.append("a"))
        sched.at(5, lambda: order.append("b"))
        sched.at(2, lambda: order.append("early"))
        sched.at(9, lambda: order.append("late"))
        sched.run_until(6)
        assert order == ["early", "a", "b", "tick"] and clock.now() == 6


class TestTraffic:
    def test_current_deployment(self):
        rep = traffic_extrapolation(TrafficParams(3156, 15, parse_size("562MB"), parse_size("6.2MB")))
        assert rep.before_bytes == pytest.approx(3156 * 562e6)
        assert rep.after_bytes == pytest.approx(3156 * 6.2e6 + 15 * 562e6)
        assert rep.ratio == pytest.approx(63.35, abs=0.01)
        assert rep.pp_requests_before == 3156 and rep.pp_requests_after == 15

    def test_projected_deployment(self):
        rep = traffic_extrapolation(TrafficParams(128000, 15, parse_size("1.2GB"), parse_size("12.9MB")))
        assert rep.before_bytes == pytest.approx(153.6e12)
        assert rep.after_bytes == pytest.approx(1.6692e12)

    @pytest.mark.parametrize("s,v", [(1.0, 1.0), (562e6, 6.2e6), (7.0, 3.5)])
    def test_single_relying_party(self, s, v):
        rep = traffic_extrapolation(TrafficParams(1, 1, s, v))
        assert rep.before_bytes == s and rep.after_bytes == v + s

    @pytest.mark.parametrize("bad", [dict(n_rp=0), dict(s_obj=-1.0), dict(s_vrp=math.inf)])
    def test_invalid_params(self, bad):
        kw = dict(n_rp=1, n_node=1, s_obj=1.0, s_vrp=1.0) | bad
        with pytest.raises(ValueError):
            TrafficParams(**kw)

    @pytest.mark.parametrize("text,value", [("562MB", 562e6), ("6.2 mb", 6.2e6), ("1.2GB", 1.2e9),
                                            ("1KiB", 1024), ("17", 17), (3.0, 3.0)])
    def test_parse_size(self, text, value):
        assert parse_size(text) == pytest.approx(value)

    def test_parse_size_rejects_garbage(self):
        with pytest.raises(ValueError):
            parse_size("12 parsecs")

    def test_format_size(self):
        assert format_size(1.6692e12) == "1.67 TB" and format_size(12) == "12 B"


class TestVerifyPresence:
    def test_subset_is_clean(self):
        assert verify_presence(vrps(R1), vrps(R1, R2)).ok

    def test_bogus_object_is_suspect(self):
        rep = verify_presence(vrps(R1, R3), vrps(R1, R2))
        assert rep.suspects == vrps(R3) and rep.caveats[R3] == ABSENT_CAVEAT

    def test_recently_revoked_gets_caveat(self):
        rep = verify_presence(vrps(R1, R2), vrps(R1), previous_reference=vrps(R1, R2))
        assert rep.suspects == vrps(R2) and rep.caveats[R2] == REVOCATION_CAVEAT
        assert "revoked" in rep.render()

    def test_absence_never_reported(self):
        assert verify_presence(VrpSet(), vrps(R1, R2, R3)).ok


def serving(masters):
    net = InMemoryNetwork()
    net.trusted.add("auditor:1")
    for addr, m in masters.items():
        svc = NodeService(addr, WallClock())
        svc.publish(master=serialize_vrp_file(m))
        net.register(svc)
    return net


class TestAudit:
    def test_converged_cluster_is_consistent(self):
        net = serving({"a:1": vrps(R1), "b:1": vrps(R1), "c:1": vrps(R1)})
        rep = audit(["a:1", "b:1", "c:1"], net.transport("auditor:1"))
        assert rep.consistent and rep.render().startswith("OK 3")

    def test_extra_object_flagged(self):
        net = serving({"a:1": vrps(R1), "b:1": vrps(R1, R2)})
        rep = audit(["a:1", "b:1"], net.transport("auditor:1"))
        assert not rep.consistent and rep.offending() == {R2}
        assert f"only-at=b:1 {R2}" in rep.render()

    def test_unreachable_is_reported_not_fatal(self):
        net = serving({"a:1": vrps(R1)})
        rep = audit(["a:1", "gone:1"], net.transport("auditor:1"))
        assert "gone:1" in rep.unreachable and rep.consistent
        assert "UNREACHABLE gone:1" in rep.render()

    def test_mid_update_diff_is_transient(self):
        first = AuditReport({}, {}, {("a:1", "b:1"): vrps(R2)})
        moved_on = AuditReport({}, {}, {("a:1", "b:1"): vrps(R3)})
        stuck = AuditReport({}, {}, {("a:1", "b:1"): vrps(R2)})
        assert classify(first, moved_on) == {("a:1", "b:1"): "transient"}
        assert classify(first, stuck) == {("a:1", "b:1"): "persistent"}

    def test_second_pass_labels(self):
        net = serving({"a:1": vrps(R1), "b:1": vrps(R1, R2)})
        t = net.transport("auditor:1")
        first = audit(["a:1", "b:1"], t)
        net.services["a:1"].publish(master=serialize_vrp_file(vrps(R1, R2)))
        net.services["b:1"].publish(master=serialize_vrp_file(vrps(R1, R2, R3)))
        second = audit(["a:1", "b:1"], t, previous=first)
        assert second.labels == {("a:1", "b:1"): "transient"} and "[transient]" in second.render()


class TestClusters:
    def test_blackout_dip_does_not_move_consensus(self):
        res = run_cluster(3, "blackout", duration=1800)
        settled = [s for s in res.samples if s.time >= res.first_completions[-1] + 20]
        plateau = len(res.scenario.ground_truth())
        assert {s.consensus for s in settled} == {plateau}
        assert min(s.locals[0] for s in settled) < plateau
        assert all(s.locals[1] == plateau for s in settled)

    @pytest.mark.parametrize("scenario", ["benign-A", "dos-ripe", "blackout"])
    def test_consensus_never_exceeds_union(self, scenario):
        res = run_cluster(5, scenario, duration=1500, seed=3)
        assert all(s.consensus <= s.union for s in res.samples)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_c_zero_consensus_is_union(self, seed):
        res = run_cluster(4, "benign-A", ConsensusConfig(c=0.0), duration=900, seed=seed)
        assert res.samples and all(s.consensus == s.union for s in res.samples)

    def test_csv_layout(self):
        res = run_cluster(3, "benign-A", duration=60)
        text = res.to_csv()
        header, first = text.splitlines()[:2]
        assert header.split(",")[:4] == ["time", "consensus", "union", "local_0"]
        assert len(header.split(",")) == 3 + 5 * 3
        assert first.startswith("10.000,")
        gp = res.to_csv("gnuplot").splitlines()
        assert gp[0].startswith("# time consensus union") and gp[1].split()[0] == "10.000"
        with pytest.raises(ValueError):
            res.to_csv("xlsx")

    def test_same_seed_same_csv(self):
        a = run_cluster(3, "dos-ripe", duration=1200, seed=5).to_csv()
        b = run_cluster(3, "dos-ripe", duration=1200, seed=5).to_csv()
        assert a == b

    def test_byzantine_services(self):
        sc = get_scenario("benign-A")
        cluster = Cluster(3, sc, ConsensusConfig(), byzantine={0: Poison(vrps(R1)), 1: Censor(sc.ground_truth())})
        cluster.run_until(400)
        fetch = lambda server: parse_vrp_file(
            cluster.network.transport(node_address(2)).fetch(node_address(server), "/vrps"))
        served = fetch(0)
        assert R1 in served.roas and served - vrps(R1) == cluster.nodes[0].local_vrps
        assert cluster.nodes[1].local_vrps and fetch(1) == VrpSet()

    def test_split_view_per_client(self):
        sc = get_scenario("benign-A")
        cluster = Cluster(3, sc, ConsensusConfig(), byzantine={2: Split({node_address(0): vrps(R2)})})
        cluster.run_until(60)
        fetch = lambda me: parse_vrp_file(cluster.network.transport(node_address(me)).fetch(node_address(2), "/vrps"))
        assert R2 in fetch(0).roas and R2 not in fetch(1).roas

    def test_bad_byzantine_index(self):
        with pytest.raises(ValueError):
            Cluster(2, get_scenario("benign-A"), ConsensusConfig(), byzantine={5: Poison(VrpSet())})


def test_loopback_tls_cluster_converges(tmp_path):
    sc = ScenarioConfig("fast", build_tree(latency=(0.001, 0.01)))
    cluster = start_loopback_cluster(3, sc, tmp_path, config=ConsensusConfig(poll_period=0.3))
    try:
        truth = sc.ground_truth()
        assert wait_for(lambda: all(rt.node.master.vrps == truth for rt in cluster.runtimes), 30)
        assert wait_for(lambda: all(len(rt.node.peering.peerlist) == 2 for rt in cluster.runtimes), 10)
    finally:
        cluster.stop()
