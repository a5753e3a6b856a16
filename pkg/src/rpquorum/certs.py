"""Trust root and node certificates for the permissioned peer network."""

from __future__ import annotations

import datetime as dt
import ipaddress
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from .model import split_address


@dataclass(frozen=True)
class CertPaths:
    cert: Path
    key: Path


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def _write_key(key, path: Path):
    path.write_bytes(key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption()))
    path.chmod(0o600)


def make_root(common_name: str = "rpquorum trust root", days: int = 3650):
    key = ec.generate_private_key(ec.SECP256R1())
    now = dt.datetime.now(dt.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name(common_name))
        .issuer_name(_name(common_name))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(x509.KeyUsage(
            digital_signature=False, content_commitment=False, key_encipherment=False,
            data_encipherment=False, key_agreement=False, key_cert_sign=True,
            crl_sign=True, encipher_only=False, decipher_only=False), critical=True)
        .sign(key, hashes.SHA256())
    )
    return key, cert


def make_leaf(root_key, root_cert, address: str, *, days: int = 365,
              not_before: dt.datetime | None = None):
    """Leaf certificate whose common name is the node address (``host[:port]``)."""
    host, _ = split_address(address, 0)
    key = ec.generate_private_key(ec.SECP256R1())
    now = dt.datetime.now(dt.timezone.utc)
    start = not_before or now - dt.timedelta(minutes=5)
    try:
        san = x509.IPAddress(ipaddress.ip_address(host))
    except ValueError:
        san = x509.DNSName(host)
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name(address))
        .issuer_name(root_cert.subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(start)
        .not_valid_after(start + dt.timedelta(days=days))
        .add_extension(x509.SubjectAlternativeName([san]), critical=False)
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(x509.ExtendedKeyUsage(
            [ExtendedKeyUsageOID.SERVER_AUTH, ExtendedKeyUsageOID.CLIENT_AUTH]), critical=False)
        .sign(root_key, hashes.SHA256())
    )
    return key, cert


def write_pem(cert, key, cert_path: Path, key_path: Path | None = None):
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    if key is not None and key_path is not None:
        _write_key(key, key_path)


def load_cert(path) -> x509.Certificate:
    return x509.load_pem_x509_certificate(Path(path).read_bytes())


def load_key(path):
    return serialization.load_pem_private_key(Path(path).read_bytes(), password=None)


def safe_name(address: str) -> str:
    return address.replace(":", "_").replace("[", "").replace("]", "")


def certgen(out_dir, addresses: Iterable[str], *, days: int = 365,
            root: tuple[Path, Path] | None = None) -> dict[str, CertPaths]:
    """Write ``root.pem``/``root.key`` (unless ``root`` is given) and one leaf per address."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if root is None:
        root_key, root_cert = make_root()
        write_pem(root_cert, root_key, out / "root.pem", out / "root.key")
    else:
        root_cert, root_key = load_cert(root[0]), load_key(root[1])
    paths = {}
    for addr in addresses:
        key, cert = make_leaf(root_key, root_cert, addr, days=days)
        name = safe_name(addr)
        cp, kp = out / f"{name}.pem", out / f"{name}.key"
        write_pem(cert, key, cp, kp)
        paths[addr] = CertPaths(cp, kp)
    return paths
