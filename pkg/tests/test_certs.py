import datetime as dt
import ipaddress

from cryptography import x509

from rpquorum.certs import certgen, load_cert, load_key, make_leaf, make_root, safe_name
from rpquorum.service import NodeIdentity


def test_leaf_chains_to_root():
    root_key, root = make_root()
    _, leaf = make_leaf(root_key, root, "10.0.0.1:8443")
    leaf.verify_directly_issued_by(root)
    assert leaf.subject.get_attributes_for_oid(x509.NameOID.COMMON_NAME)[0].value == "10.0.0.1:8443"
    san = leaf.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    assert san.get_values_for_type(x509.IPAddress) == [ipaddress.ip_address("10.0.0.1")]
    assert not leaf.extensions.get_extension_for_class(x509.BasicConstraints).value.ca


def test_dns_name_san():
    root_key, root = make_root()
    _, leaf = make_leaf(root_key, root, "node.example:8443")
    san = leaf.extensions.get_extension_for_class(x509.SubjectAlternativeName).value
    assert san.get_values_for_type(x509.DNSName) == ["node.example"]


def test_validity_window():
    root_key, root = make_root()
    start = dt.datetime(2020, 1, 1, tzinfo=dt.timezone.utc)
    _, leaf = make_leaf(root_key, root, "a:1", days=10, not_before=start)
    assert leaf.not_valid_after_utc - leaf.not_valid_before_utc == dt.timedelta(days=10)


def test_certgen_writes_usable_files(tmp_path):
    paths = certgen(tmp_path, ["127.0.0.1:8443", "[::1]:8443"])
    assert (tmp_path / "root.pem").exists() and (tmp_path / "root.key").stat().st_mode & 0o777 == 0o600
    for addr, p in paths.items():
        assert p.cert.name == safe_name(addr) + ".pem"
        NodeIdentity(addr, str(p.cert), str(p.key), str(tmp_path / "root.pem")).verify()
        load_key(p.key)


def test_certgen_reuses_existing_root(tmp_path):
    certgen(tmp_path / "a", [])
    root = (tmp_path / "a" / "root.pem", tmp_path / "a" / "root.key")
    paths = certgen(tmp_path / "b", ["10.0.0.9:1"], root=root)
    assert not (tmp_path / "b" / "root.pem").exists()
    load_cert(paths["10.0.0.9:1"].cert).verify_directly_issued_by(load_cert(root[0]))
