import datetime as dt
import random

import pytest

from rpquorum.certs import make_leaf, make_root, write_pem


@pytest.fixture
def rng():
    return random.Random(1234)


class PKI:
    """A trust root on disk plus a helper to mint leaves under it."""

    def __init__(self, directory):
        self.dir = directory
        self.root_key, self.root_cert = make_root()
        self.root = str(directory / "root.pem")
        write_pem(self.root_cert, self.root_key, directory / "root.pem", directory / "root.key")

    def leaf(self, address, *, days=30, not_before=None, root=None):
        root_key, root_cert = root or (self.root_key, self.root_cert)
        key, cert = make_leaf(root_key, root_cert, address, days=days, not_before=not_before)
        name = address.replace(":", "_") + f"-{random.random():.6f}"
        cp, kp = self.dir / f"{name}.pem", self.dir / f"{name}.key"
        write_pem(cert, key, cp, kp)
        return str(cp), str(kp)

    def expired_leaf(self, address):
        start = dt.datetime.now(dt.timezone.utc) - dt.timedelta(days=10)
        return self.leaf(address, days=1, not_before=start)


@pytest.fixture
def pki(tmp_path):
    return PKI(tmp_path)
