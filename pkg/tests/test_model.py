import gzip
import json

import pytest
from hypothesis import given, strategies as st

from rpquorum.model import (
    EMPTY_VRPS, ConsensusConfig, MalformedFile, Peerlist, PeerSnapshot, Skiplist, SkiplistEntry,
    SkipSource, VrpKind, VrpSet, canonicalize_aspa, canonicalize_roa, canonicalize_vrp,
    normalize_address, parse_peerlist, parse_skiplist, parse_skiplist_sidecar, parse_vrp_file, roa,
    serialize_peerlist, serialize_skiplist, serialize_skiplist_sidecar, serialize_vrp_file,
)

LISTING = b"""{
  "roas": [
    {"asn":"AS65537","prefix":"192.0.2.0/24","maxLength":24,"ta":"ARIN"},
    {"asn":"AS12345","prefix":"2001:db8::/32","maxLength":48,"ta":"RIPE"}
  ]
}"""


class TestCanonical:
    def test_ipv4_roa(self):
        v = canonicalize_roa("AS65537", "192.0.2.0/24", 24, "ARIN")
        assert v.payload == '{"asn":"AS65537","prefix":"192.0.2.0/24","maxLength":24,"ta":"ARIN"}'

    def test_ipv6_roa(self):
        v = canonicalize_roa("AS12345", "2001:db8::/32", 48, "RIPE")
        assert v.payload == '{"asn":"AS12345","prefix":"2001:db8::/32","maxLength":48,"ta":"RIPE"}'

    def test_max_length_below_prefix_length(self):
        with pytest.raises(ValueError, match="maxLength"):
            canonicalize_roa("AS1", "10.0.0.0/8", 7, "RIPE")

    @pytest.mark.parametrize("prefix", ["10.0.0.1/8", "300.0.0.0/8", "2001:db8::/129", "nope"])
    def test_bad_prefix(self, prefix):
        with pytest.raises(ValueError):
            canonicalize_roa(1, prefix, 32, "RIPE")

    @pytest.mark.parametrize("asn", [-1, 2**32, "ASx", "AS4294967296"])
    def test_bad_asn(self, asn):
        with pytest.raises(ValueError):
            canonicalize_roa(asn, "10.0.0.0/8", 8, "RIPE")

    def test_equivalent_spellings_collapse(self):
        a = canonicalize_roa("as64496", "2001:DB8:0::/32", 32, "RIPE")
        b = canonicalize_roa(64496, "2001:db8::/32", 32, "RIPE")
        assert a == b

    def test_rpki_client_field_names(self):
        v = canonicalize_vrp("roa", {"asn": 65537, "prefix": "192.0.2.0/24", "max_length": 24, "ta": "arin"})
        assert json.loads(v.payload)["maxLength"] == 24

    def test_aspa_provider_order_is_irrelevant(self):
        a = canonicalize_aspa(1, [3, 2], "RIPE")
        b = canonicalize_aspa("AS1", ["AS2", "AS3"], "RIPE")
        assert a == b and a.kind is VrpKind.ASPA


class TestVrpFile:
    def test_two_roa_listing(self):
        vs = parse_vrp_file(LISTING)
        assert len(vs.roas) == 2 and not vs.aspas and not vs.bgpsec_keys

    def test_empty_document(self):
        assert parse_vrp_file(b"{}") == EMPTY_VRPS

    def test_duplicate_collapses(self):
        doc = {"roas": [{"asn": "AS1", "prefix": "10.0.0.0/8", "maxLength": 8, "ta": "RIPE"}] * 2}
        assert len(parse_vrp_file(json.dumps(doc).encode()).roas) == 1

    def test_gzip_input(self):
        assert parse_vrp_file(gzip.compress(LISTING)) == parse_vrp_file(LISTING)

    @pytest.mark.parametrize("doc", [b"[]", b"{", b'{"roas": {}}', b'{"roas": [1]}',
                                     b'{"roas": [{"asn": "AS1"}]}', b"\xff\xfe"])
    def test_malformed(self, doc):
        with pytest.raises(MalformedFile):
            parse_vrp_file(doc)

    def test_serialization_is_byte_stable(self):
        vs = parse_vrp_file(LISTING)
        out = serialize_vrp_file(vs)
        assert out == serialize_vrp_file(parse_vrp_file(out))
        assert json.loads(out)["roas"][0]["asn"] == "AS12345"  # sorted canonical strings


asns = st.integers(0, 2**32 - 1)
v4 = st.builds(lambda a, l: (f"{a >> 24}.{(a >> 16) & 255}.{(a >> 8) & 255}.{a & 255}", l),
               st.integers(0, 2**32 - 1), st.integers(0, 32))


@st.composite
def roa_strings(draw):
    addr, plen = draw(v4)
    import ipaddress
    net = ipaddress.ip_network(f"{addr}/{plen}", strict=False)
    mlen = draw(st.integers(plen, 32))
    return roa(draw(asns), str(net), mlen, draw(st.sampled_from(["ARIN", "RIPE"])))


@given(st.frozensets(roa_strings(), max_size=20))
def test_vrp_file_round_trip(roas):
    vs = VrpSet(roas=roas)
    assert parse_vrp_file(serialize_vrp_file(vs)) == vs


@given(st.frozensets(roa_strings(), max_size=8), st.frozensets(roa_strings(), max_size=8))
def test_set_algebra_matches_frozensets(a, b):
    x, y = VrpSet(roas=a), VrpSet(roas=b)
    assert (x | y).roas == a | b
    assert (x & y).roas == a & b
    assert (x - y).roas == a - b
    assert (x ^ y).roas == a ^ b
    assert x.issubset(x | y)


class TestSkiplist:
    def test_two_line_file(self):
        assert parse_skiplist(b"rpki.ripe.net\nrrdp.arin.net\n") == {"rpki.ripe.net", "rrdp.arin.net"}

    def test_empty(self):
        assert parse_skiplist(b"") == frozenset()

    def test_comments_blank_lines_and_case(self):
        assert parse_skiplist("# x\n\nRPKI.Ripe.NET.\n") == {"rpki.ripe.net"}

    @pytest.mark.parametrize("line", ["https://rpki.ripe.net/", "rpki.ripe.net:443", "two words", "-bad-.net"])
    def test_whole_file_rejected_on_bad_line(self, line):
        with pytest.raises(MalformedFile):
            parse_skiplist(f"rpki.ripe.net\n{line}\n")

    def test_round_trip_is_sorted(self):
        assert serialize_skiplist({"b.net", "a.net"}) == b"a.net\nb.net\n"

    def test_sidecar_round_trip(self):
        sl = Skiplist({"a.net": SkiplistEntry("a.net", 12.5, SkipSource.CRASH),
                       "b.net": SkiplistEntry("b.net", 3.0, SkipSource.STALL)})
        assert parse_skiplist_sidecar(serialize_skiplist_sidecar(sl)) == sl


class TestPeerlist:
    def test_two_line_file(self):
        assert parse_peerlist(b"172.17.0.2\n172.17.0.3\n").peers == ("172.17.0.2", "172.17.0.3")

    def test_order_preserving_dedupe(self):
        assert Peerlist(("b:1", "a:1", "b:1")).peers == ("b:1", "a:1")

    @pytest.mark.parametrize("text,expected", [
        ("10.0.0.1:8443", "10.0.0.1:8443"), ("[2001:DB8::1]:443", "[2001:db8::1]:443"),
        ("Node.Example", "node.example"), ("2001:db8::1", "2001:db8::1"),
    ])
    def test_normalize(self, text, expected):
        assert normalize_address(text) == expected

    @pytest.mark.parametrize("bad", ["", "host:0", "host:99999", "[::1", "a b"])
    def test_bad_address(self, bad):
        with pytest.raises(ValueError):
            normalize_address(bad)

    def test_serialize_excludes_self(self):
        assert serialize_peerlist(Peerlist(("a:1", "b:1")), "a:1") == b"b:1\n"


def test_snapshot_freshness_boundary():
    snap = PeerSnapshot("a:1", 100.0)
    assert snap.is_fresh(160.0, 60.0)
    assert not snap.is_fresh(160.5, 60.0)


class TestConsensusConfig:
    def test_defaults(self):
        cfg = ConsensusConfig()
        assert (cfg.c, cfg.staleness_tolerance, cfg.poll_period) == (0.5, 3600.0, 10.0)
        assert cfg.connection_timeout == cfg.global_timeout / 4

    @pytest.mark.parametrize("field,value", [("c", 1.5), ("c", -0.1), ("staleness_tolerance", 0),
                                             ("stall_fraction", 0), ("poll_period", -1)])
    def test_rejects(self, field, value):
        with pytest.raises(ValueError, match=f"^{field}"):
            ConsensusConfig(**{field: value})
