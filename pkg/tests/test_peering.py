import random

import pytest

from rpquorum.harness import VirtualClock
from rpquorum.model import (
    ConsensusConfig, Peerlist, PeerSnapshot, VrpSet, roa, serialize_peerlist, serialize_skiplist,
    serialize_vrp_file,
)
from rpquorum.peering import (
    AccessLogEntry, AuthError, MalformedPeerData, PeeringState, PeerUnreachable, admit_candidate,
    discover_candidates, peering_round, poll_peer,
)
from rpquorum.service import InMemoryNetwork, NodeService

R1, R2, R3 = roa(1, "10.0.0.0/8"), roa(2, "11.0.0.0/8"), roa(3, "12.0.0.0/8")


def vrps(*roas):
    return VrpSet(roas=frozenset(roas))


class Net:
    def __init__(self):
        self.clock = VirtualClock(100.0)
        self.network = InMemoryNetwork()
        self.services = {}

    def add(self, address, *, roas=(), skip=(), peers=(), trusted=True):
        svc = NodeService(address, self.clock)
        svc.publish(vrps=serialize_vrp_file(vrps(*roas)), skiplist=serialize_skiplist(skip),
                    peerlist=serialize_peerlist(peers, address))
        self.network.register(svc, trusted=trusted)
        self.services[address] = svc
        return svc

    def transport(self, address="me:1"):
        return self.network.transport(address)


@pytest.fixture
def net():
    n = Net()
    n.network.trusted.add("me:1")
    return n


class TestPollPeer:
    def test_healthy(self, net):
        net.add("b:1", roas=[R1], skip=["x.net"], peers=["c:1"])
        snap = poll_peer(net.transport(), "b:1", net.clock)
        assert snap.vrps == vrps(R1) and snap.skiplist == {"x.net"} and snap.peerlist.peers == ("c:1",)
        assert snap.fetched_at == 100.0

    def test_untrusted_peer(self, net):
        net.add("b:1", trusted=False)
        with pytest.raises(AuthError):
            poll_peer(net.transport(), "b:1", net.clock)

    def test_unreachable(self, net):
        with pytest.raises(PeerUnreachable):
            poll_peer(net.transport(), "nobody:1", net.clock)

    def test_malformed(self, net):
        net.add("b:1").publish(vrps=b"{not json")
        with pytest.raises(MalformedPeerData):
            poll_peer(net.transport(), "b:1", net.clock)


class TestDiscovery:
    def test_from_peerlists(self):
        st = PeeringState("a:1", Peerlist(("b:1",)))
        assert discover_candidates(st, [Peerlist(("c:1", "a:1", "b:1"))], []) == {"c:1"}

    def test_from_access_log(self):
        st = PeeringState("a:1", Peerlist(("b:1",)))
        log = [AccessLogEntry("d:1", "/peerlist", 5.0), AccessLogEntry("e:1", "/vrps", 5.0)]
        assert discover_candidates(st, [], log) == {"d:1"}

    def test_empty(self):
        assert discover_candidates(PeeringState("a:1"), [], []) == set()


class TestAdmission:
    def test_success_grows_peerlist(self, net):
        net.add("c:1", roas=[R1])
        st = admit_candidate(PeeringState("me:1", candidates=frozenset({"c:1"})), "c:1", net.transport(), net.clock)
        assert st.peerlist.peers == ("c:1",) and "c:1" in st.snapshots and not st.candidates

    def test_auth_failure_keeps_peerlist(self, net):
        net.add("c:1", trusted=False)
        st = admit_candidate(PeeringState("me:1", candidates=frozenset({"c:1"})), "c:1", net.transport(), net.clock)
        assert st.peerlist.peers == () and not st.candidates

    def test_self_rejected_without_probe(self, net):
        class Exploding:
            def fetch(self, *a):
                raise AssertionError("probed")
        st = admit_candidate(PeeringState("me:1"), "me:1", Exploding(), net.clock)
        assert st.peerlist.peers == ()

    def test_self_stripped_from_state(self):
        assert PeeringState("a:1", Peerlist(("a:1", "b:1"))).peerlist.peers == ("b:1",)


class TestRound:
    cfg = ConsensusConfig(staleness_tolerance=60)

    def own(self, net, *roas):
        return PeerSnapshot("me:1", net.clock.now(), vrps(*roas))

    def test_agreeing_cluster(self, net):
        net.add("b:1", roas=[R1, R2])
        net.add("c:1", roas=[R1, R2])
        st = PeeringState("me:1", Peerlist(("b:1", "c:1")))
        st, master = peering_round(st, self.own(net, R1, R2), net.transport(), self.cfg, net.clock,
                                   rng=random.Random(0))
        assert master.vrps == vrps(R1, R2) and master.participant_count == 3
        assert st.last_poll == 100.0

    def test_failed_poll_keeps_previous_snapshot_until_stale(self, net):
        for p in "bcde":
            net.add(f"{p}:1", roas=[R1])
        st = PeeringState("me:1", Peerlist(tuple(f"{p}:1" for p in "bcde")))
        st, m = peering_round(st, self.own(net, R1), net.transport(), self.cfg, net.clock)
        assert m.participant_count == 5
        net.network.down.add("e:1")
        net.clock.t += 30
        st, m = peering_round(st, self.own(net, R1), net.transport(), self.cfg, net.clock)
        assert m.participant_count == 5 and st.snapshots["e:1"].fetched_at == 100.0
        net.clock.t += 40
        st, m = peering_round(st, self.own(net, R1), net.transport(), self.cfg, net.clock)
        assert m.participant_count == 4 and "e:1" in st.peerlist

    def test_malformed_response_keeps_previous_snapshot(self, net):
        svc = net.add("b:1", roas=[R1])
        st = PeeringState("me:1", Peerlist(("b:1",)))
        st, _ = peering_round(st, self.own(net), net.transport(), self.cfg, net.clock)
        svc.publish(vrps=b"garbage")
        net.clock.t += 10
        st, _ = peering_round(st, self.own(net), net.transport(), self.cfg, net.clock)
        assert st.snapshots["b:1"].vrps == vrps(R1) and st.snapshots["b:1"].fetched_at == 100.0

    def test_access_log_window_and_transitive_admission(self, net):
        # d asked for our peerlist; d knows e, which we have never heard of
        net.add("d:1", roas=[R1], peers=["e:1"])
        net.add("e:1", roas=[R1])
        log = [AccessLogEntry("d:1", "/peerlist", 99.0), AccessLogEntry("x:1", "/peerlist", 100.0)]
        st = PeeringState("me:1", last_poll=90.0)
        st, m = peering_round(st, self.own(net, R1), net.transport(), self.cfg, net.clock, access_log=log)
        assert set(st.peerlist.peers) == {"d:1", "e:1"} and m.participant_count == 3

    def test_access_log_entries_before_last_poll_ignored(self, net):
        net.add("d:1")
        st = PeeringState("me:1", last_poll=99.5)
        st, _ = peering_round(st, self.own(net), net.transport(), self.cfg, net.clock,
                              access_log=[AccessLogEntry("d:1", "/peerlist", 99.0)])
        assert st.peerlist.peers == ()
