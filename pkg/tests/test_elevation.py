import json

import pytest

from herbage.data_model import load_manifest
from herbage.elevation import (
    ElevationError,
    ElevationSource,
    annotate_altitude,
    load_fixture_table,
    relative_altitude,
    terrain_elevation,
)
from herbage.errors import DataError


class FakeClock:
    def __init__(self):
        self.t = 0.0
        self.sleeps = []

    def sleep(self, s):
        self.sleeps.append(s)
        self.t += s

    def now(self):
        self.t += 0.01  # each clock read advances slightly
        return self.t


class FakeResponse:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status = status

    def raise_for_status(self):
        if self.status != 200:
            raise RuntimeError(f"HTTP {self.status}")

    def json(self):
        return self.payload


def make_http_source(monkeypatch, responses, tmp_path=None):
    clock = FakeClock()
    calls = []

    def fake_get(url, params=None, timeout=None):
        calls.append((url, params))
        resp = responses[min(len(calls) - 1, len(responses) - 1)]
        if isinstance(resp, Exception):
            raise resp
        return resp

    import requests

    monkeypatch.setattr(requests, "get", fake_get)
    source = ElevationSource(
        mode="http",
        endpoint="https://example.org/v1",
        cache_file=None if tmp_path is None else tmp_path / "cache.json",
        sleep=clock.sleep,
        clock=clock.now,
    )
    return source, clock, calls


def test_mode_validation():
    with pytest.raises(DataError):
        ElevationSource(mode="carrier-pigeon")


def test_coordinate_validation():
    src = ElevationSource(mode="fixture", fixture={(0.0, 0.0): 10.0})
    with pytest.raises(DataError):
        terrain_elevation(src, 91.0, 0.0)
    with pytest.raises(DataError):
        terrain_elevation(src, 0.0, 181.0)


def test_fixture_lookup_and_miss():
    src = ElevationSource(mode="fixture", fixture={(53.3, -8.1): 62.0})
    assert terrain_elevation(src, 53.3, -8.1) == 62.0
    # rounding to 5 decimals matches nearby coordinates
    assert terrain_elevation(src, 53.300001, -8.100001) == 62.0
    with pytest.raises(ElevationError):
        terrain_elevation(src, 10.0, 10.0)


def test_http_request_wire_format(monkeypatch):
    src, _, calls = make_http_source(
        monkeypatch, [FakeResponse({"results": [{"elevation": 88.5}]})]
    )
    assert terrain_elevation(src, 53.5, -8.25) == 88.5
    url, params = calls[0]
    assert url == "https://example.org/v1/aster30m"
    assert params == {"locations": "53.5,-8.25"}


def test_http_caching_avoids_second_request(monkeypatch, tmp_path):
    src, _, calls = make_http_source(
        monkeypatch, [FakeResponse({"results": [{"elevation": 12.0}]})], tmp_path
    )
    assert terrain_elevation(src, 1.0, 2.0) == 12.0
    assert terrain_elevation(src, 1.0, 2.0) == 12.0
    assert len(calls) == 1
    # cache file persists across source instances
    src2 = ElevationSource(mode="http", cache_file=tmp_path / "cache.json")
    assert terrain_elevation(src2, 1.0, 2.0) == 12.0
    assert src2.request_count == 0


def test_http_retries_then_succeeds(monkeypatch):
    src, clock, calls = make_http_source(
        monkeypatch,
        [
            ConnectionError("down"),
            ConnectionError("still down"),
            FakeResponse({"results": [{"elevation": 5.0}]}),
        ],
    )
    assert terrain_elevation(src, 0.0, 0.0) == 5.0
    assert len(calls) == 3
    # exponential backoff sleeps (0.5, 1.0) are among the waits
    assert 0.5 in clock.sleeps and 1.0 in clock.sleeps


def test_http_gives_up_after_three_attempts(monkeypatch):
    src, _, calls = make_http_source(monkeypatch, [ConnectionError("down")])
    with pytest.raises(ElevationError, match="3 attempts"):
        terrain_elevation(src, 0.0, 0.0)
    assert len(calls) == 3


def test_http_empty_results_is_fatal_not_retried(monkeypatch):
    src, _, calls = make_http_source(monkeypatch, [FakeResponse({"results": []})])
    with pytest.raises(ElevationError, match="no elevation"):
        terrain_elevation(src, 0.0, 0.0)
    assert len(calls) == 1


def test_http_rate_limit_spacing(monkeypatch):
    src, clock, _ = make_http_source(
        monkeypatch,
        [
            FakeResponse({"results": [{"elevation": 1.0}]}),
            FakeResponse({"results": [{"elevation": 2.0}]}),
        ],
    )
    terrain_elevation(src, 0.0, 0.0)
    terrain_elevation(src, 1.0, 1.0)
    # the second request waited out the remainder of the 1 s interval
    assert any(s > 0.9 for s in clock.sleeps)


def test_relative_altitude():
    src = ElevationSource(mode="fixture", fixture={(53.0, -8.0): 60.0})
    assert relative_altitude(src, 68.0, 53.0, -8.0) == pytest.approx(8.0)
    with pytest.raises(DataError, match="implausible"):
        relative_altitude(src, 50.0, 53.0, -8.0)


def test_load_fixture_table(tmp_path):
    path = tmp_path / "table.json"
    path.write_text(json.dumps([[53.0, -8.0, 61.5], [53.1, -8.1, 70.0]]))
    table = load_fixture_table(path)
    assert table == {(53.0, -8.0): 61.5, (53.1, -8.1): 70.0}


def _raw_manifest(tmp_path, records):
    path = tmp_path / "in.json"
    path.write_text(json.dumps({"version": 1, "schema": "irish", "records": records}))
    return path


def test_annotate_altitude(tmp_path):
    src = ElevationSource(mode="fixture", fixture={(53.0, -8.0): 60.0})
    raw = _raw_manifest(
        tmp_path,
        [
            {"id": "d0", "path": "d0.png", "domain": "drone",
             "gps": [53.0, -8.0], "gps_altitude_asl_m": 69.5},
            {"id": "g0", "path": "g0.png", "domain": "ground"},
        ],
    )
    out = tmp_path / "out.json"
    assert annotate_altitude(raw, out, src) == 1
    m = load_manifest(out)
    d0 = m.by_domain("drone")[0]
    assert d0.altitude_m == pytest.approx(9.5)
    # the raw GPS-ASL field is consumed, not propagated
    assert "gps_altitude_asl_m" not in out.read_text()


def test_annotate_altitude_requires_gps(tmp_path):
    src = ElevationSource(mode="fixture")
    raw = _raw_manifest(
        tmp_path, [{"id": "d0", "path": "d0.png", "domain": "drone"}]
    )
    with pytest.raises(DataError, match="gps"):
        annotate_altitude(raw, tmp_path / "out.json", src)


def test_annotate_altitude_skips_already_annotated(tmp_path):
    src = ElevationSource(mode="fixture")
    raw = _raw_manifest(
        tmp_path,
        [{"id": "d0", "path": "d0.png", "domain": "drone", "altitude_m": 7.0}],
    )
    assert annotate_altitude(raw, tmp_path / "out.json", src) == 0
