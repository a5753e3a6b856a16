import pytest

from rpquorum.config import ConfigError, NodeConfig, load_config
from rpquorum.model import ConsensusConfig


def write(tmp_path, text):
    p = tmp_path / "node.ini"
    p.write_text(text)
    return p


def test_empty_file_gives_defaults(tmp_path):
    cfg = load_config(write(tmp_path, ""), env={})
    assert cfg == NodeConfig()
    assert cfg.consensus == ConsensusConfig()
    assert (cfg.consensus.c, cfg.consensus.staleness_tolerance, cfg.consensus.blacklist_expiry) == (0.5, 3600, 86400)


def test_no_path_gives_defaults():
    assert load_config(env={}) == NodeConfig()


@pytest.mark.parametrize("text,path", [
    ("[consensus]\nc = 1.5\n", "consensus.c"),
    ("[consensus]\nc = -0.1\n", "consensus.c"),
    ("[consensus]\npoll_period = 0\n", "consensus.poll_period"),
    ("[consensus]\nstall_fraction = abc\n", "consensus.stall_fraction"),
    ("[consensus]\nfoo = 1\n", "consensus.foo"),
    ("[node]\nhttps_port = 8323\n", "node.rtr_port"),
    ("[node]\nhttps_port = 99999\n", "node.https_port"),
    ("[node]\nrtr_tls = maybe\n", "node.rtr_tls"),
    ("[node]\nmode = cloud\n", "node.mode"),
    ("[node]\nprofile = experiment-z\n", "node.profile"),
    ("[node]\naddress = not an address\n", "node.address"),
    ("[tls]\npassword = x\n", "tls.password"),
    ("[extra]\nx = 1\n", "extra"),
])
def test_invalid_values_name_the_field(tmp_path, text, path):
    with pytest.raises(ConfigError) as exc:
        load_config(write(tmp_path, text), env={})
    assert exc.value.path == path
    assert str(exc.value).startswith(path)


def test_profiles(tmp_path):
    assert load_config(write(tmp_path, "[node]\nprofile = experiment-a\n"), env={}).refresh_interval == 10
    assert load_config(write(tmp_path, "[node]\nprofile = experiment-b\n"), env={}).refresh_interval == 600


def test_explicit_key_beats_profile(tmp_path):
    cfg = load_config(write(tmp_path, "[node]\nprofile = experiment-b\nrefresh_interval = 42\n"), env={})
    assert cfg.refresh_interval == 42


def test_full_file(tmp_path):
    cfg = load_config(write(tmp_path, """
[node]
address = 10.0.0.5:8443
rtr_port = 9323
rtr_tls = yes
node_index = 3
[consensus]
c = 0.25
staleness_tolerance = 120
[tls]
cert = /c.pem
key = /c.key
root = /r.pem
"""), env={})
    assert cfg.address == "10.0.0.5:8443" and cfg.rtr_port == 9323 and cfg.rtr_tls is True
    assert cfg.node_index == 3 and cfg.consensus.c == 0.25 and cfg.consensus.staleness_tolerance == 120
    assert (cfg.cert, cfg.key, cfg.root) == ("/c.pem", "/c.key", "/r.pem")


def test_environment_overrides_file(tmp_path):
    path = write(tmp_path, "[node]\nhttps_port = 1000\n[tls]\ncert = /file.pem\n")
    cfg = load_config(path, env={"RPQUORUM_HTTPS_PORT": "2000", "RPQUORUM_CERT": "/env.pem"})
    assert cfg.https_port == 2000 and cfg.cert == "/env.pem"


def test_programmatic_overrides(tmp_path):
    assert load_config(env={}, overrides={"seed": 9}).seed == 9
