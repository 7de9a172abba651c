"""Config file parsing, line-numbered errors, environment overrides."""

from __future__ import annotations

from datetime import date, time

import pytest

from rollcall import config as cfgmod
from rollcall.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "node.conf"
    path.write_text(text)
    return str(path)


class TestParsing:
    def test_basic_file(self, tmp_path):
        path = write(tmp_path, """
# edge node settings
edge.node_id = gate-1
edge.listen = 127.0.0.1:7420   # readers
policy.present_start = 07:00:00
policy.holidays = 2025-07-28, 2025-07-29
""")
        cfg = cfgmod.parse_config(path)
        assert cfg["edge.node_id"] == "gate-1"
        assert cfg["edge.listen"] == "127.0.0.1:7420"
        assert cfgmod.get_time(cfg, "policy.present_start", time(6)) == time(7, 0)
        assert cfgmod.get_dates(cfg, "policy.holidays") == \
            frozenset({date(2025, 7, 28), date(2025, 7, 29)})

    def test_error_carries_line_number(self, tmp_path):
        path = write(tmp_path, "edge.node_id = ok\nthis line is wrong\n")
        with pytest.raises(ConfigError) as err:
            cfgmod.parse_config(path)
        assert ":2:" in str(err.value)

    def test_bad_key_rejected_with_line(self, tmp_path):
        path = write(tmp_path, "Bad Key = x\n")
        with pytest.raises(ConfigError) as err:
            cfgmod.parse_config(path)
        assert ":1:" in str(err.value)

    def test_typed_getter_errors(self, tmp_path):
        path = write(tmp_path, "edge.sync_interval_s = soon\npolicy.closure = later\n")
        cfg = cfgmod.parse_config(path)
        with pytest.raises(ConfigError):
            cfgmod.get_float(cfg, "edge.sync_interval_s", 1.0)
        with pytest.raises(ConfigError):
            cfgmod.get_time(cfg, "policy.closure", time(8))
        with pytest.raises(ConfigError):
            cfgmod.get_str(cfg, "edge.node_id")

    def test_hostport(self, tmp_path):
        cfg = {"edge.listen": "0.0.0.0:9000"}
        assert cfgmod.get_hostport(cfg, "edge.listen") == ("0.0.0.0", 9000)
        with pytest.raises(ConfigError):
            cfgmod.get_hostport({"edge.listen": "nope"}, "edge.listen")

    def test_weekdays(self):
        cfg = {"policy.school_days": "mon,wed,fri"}
        assert cfgmod.get_weekdays(cfg, "policy.school_days", frozenset()) == \
            frozenset({0, 2, 4})
        with pytest.raises(ConfigError):
            cfgmod.get_weekdays({"policy.school_days": "noday"}, "policy.school_days",
                                frozenset())


class TestEnvOverrides:
    def test_env_overrides_file_value(self, tmp_path):
        path = write(tmp_path, "edge.node_id = from-file\n")
        environ = {"ROLLCALL_EDGE__NODE_ID": "from-env"}
        cfg = cfgmod.load_config(path, environ)
        assert cfg["edge.node_id"] == "from-env"

    def test_env_can_introduce_new_keys(self, tmp_path):
        path = write(tmp_path, "edge.node_id = n1\n")
        environ = {"ROLLCALL_EDGE__CENTRAL_URL": "http://example:8430"}
        cfg = cfgmod.load_config(path, environ)
        assert cfg["edge.central_url"] == "http://example:8430"

    def test_unrelated_env_ignored(self, tmp_path):
        path = write(tmp_path, "edge.node_id = n1\n")
        cfg = cfgmod.load_config(path, {"PATH": "/bin"})
        assert cfg == {"edge.node_id": "n1"}
