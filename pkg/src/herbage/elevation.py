"""Terrain elevation lookup and relative drone altitude computation.

Two modes: ``http`` queries an opentopodata-style endpoint
(``/v1/<dataset>?locations=lat,lon`` returning ``{"results": [{"elevation":
...}]}``); ``fixture`` serves a local table and never touches the network.
Results are cached in a JSON file keyed by coordinates rounded to 5 decimals
(~1 m, below GPS accuracy).
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .data_model import load_manifest, save_manifest
from .errors import DataError, PipelineError

DEFAULT_ENDPOINT = "https://api.opentopodata.org/v1"
CACHE_DECIMALS = 5
MAX_ATTEMPTS = 3
MIN_REQUEST_INTERVAL = 1.0  # public API etiquette: 1 request/sec


class ElevationError(PipelineError):
    """Lookup failure: network error after retries, or fixture miss."""


def _cache_key(lat: float, lon: float) -> str:
    return f"{round(lat, CACHE_DECIMALS):.5f},{round(lon, CACHE_DECIMALS):.5f}"


@dataclass
class ElevationSource:
    mode: str = "fixture"  # "http" | "fixture"
    endpoint: str = DEFAULT_ENDPOINT
    dataset: str = "aster30m"
    fixture: dict[tuple[float, float], float] = field(default_factory=dict)
    cache_file: Optional[str | Path] = None
    # Injectable for tests.
    sleep: Callable[[float], None] = time.sleep
    clock: Callable[[], float] = time.monotonic

    request_count: int = 0
    _cache: dict[str, float] = field(default_factory=dict)
    _last_request: float = field(default=float("-inf"))

    def __post_init__(self) -> None:
        if self.mode not in ("http", "fixture"):
            raise DataError(f"unknown elevation source mode {self.mode!r}")
        if self.cache_file is not None and Path(self.cache_file).exists():
            with open(self.cache_file) as fh:
                self._cache = {str(k): float(v) for k, v in json.load(fh).items()}

    def _save_cache(self) -> None:
        if self.cache_file is None:
            return
        path = Path(self.cache_file)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self._cache, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _fetch_http(self, lat: float, lon: float) -> float:
        import requests

        url = f"{self.endpoint.rstrip('/')}/{self.dataset}"
        last_error: Exception | None = None
        for attempt in range(MAX_ATTEMPTS):
            wait = MIN_REQUEST_INTERVAL - (self.clock() - self._last_request)
            if wait > 0:
                self.sleep(wait)
            try:
                self._last_request = self.clock()
                self.request_count += 1
                resp = requests.get(url, params={"locations": f"{lat},{lon}"}, timeout=10)
                resp.raise_for_status()
                results = resp.json().get("results", [])
                if not results or results[0].get("elevation") is None:
                    raise ElevationError(f"no elevation result for ({lat}, {lon})")
                return float(results[0]["elevation"])
            except ElevationError:
                raise
            except Exception as exc:  # network / HTTP / JSON errors: retry
                last_error = exc
                if attempt < MAX_ATTEMPTS - 1:
                    self.sleep(0.5 * 2**attempt)
        raise ElevationError(
            f"elevation lookup failed after {MAX_ATTEMPTS} attempts: {last_error}"
        )

    def _fetch_fixture(self, lat: float, lon: float) -> float:
        key = (round(lat, CACHE_DECIMALS), round(lon, CACHE_DECIMALS))
        for (flat, flon), elev in self.fixture.items():
            if (round(flat, CACHE_DECIMALS), round(flon, CACHE_DECIMALS)) == key:
                return float(elev)
        raise ElevationError(f"fixture has no elevation for ({lat}, {lon})")


def load_fixture_table(path: str | Path) -> dict[tuple[float, float], float]:
    """Fixture file: JSON list of [lat, lon, elevation_m] triples."""
    with open(path) as fh:
        rows = json.load(fh)
    return {(float(r[0]), float(r[1])): float(r[2]) for r in rows}


def terrain_elevation(source: ElevationSource, lat: float, lon: float) -> float:
    """Terrain elevation (m ASL) at the coordinates, served from cache when possible."""
    if not (-90.0 <= lat <= 90.0):
        raise DataError(f"latitude {lat} outside [-90, 90]")
    if not (-180.0 <= lon <= 180.0):
        raise DataError(f"longitude {lon} outside [-180, 180]")
    key = _cache_key(lat, lon)
    if key in source._cache:
        return source._cache[key]
    if source.mode == "fixture":
        elev = source._fetch_fixture(lat, lon)
    else:
        elev = source._fetch_http(lat, lon)
    source._cache[key] = elev
    source._save_cache()
    return elev


def relative_altitude(
    source: ElevationSource, gps_altitude_asl: float, lat: float, lon: float
) -> float:
    """Drone height above local terrain: GPS altitude ASL minus terrain elevation."""
    rel = gps_altitude_asl - terrain_elevation(source, lat, lon)
    if rel <= 0:
        raise DataError(
            f"implausible relative altitude {rel} m at ({lat}, {lon}); "
            f"GPS altitude {gps_altitude_asl} m does not clear the terrain"
        )
    return rel


def annotate_altitude(
    manifest_in: str | Path,
    manifest_out: str | Path,
    source: ElevationSource,
) -> int:
    """Fill in altitude_m for drone records carrying gps + gps_altitude_asl_m.

    The input may be a not-yet-valid manifest (drone records without
    altitude); the output is validated. Returns the number of records
    annotated.
    """
    path = Path(manifest_in)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path) as fh:
        obj = json.load(fh)
    n = 0
    for raw in obj.get("records", []):
        if raw.get("domain") != "drone" or raw.get("altitude_m") is not None:
            continue
        gps = raw.get("gps")
        asl = raw.get("gps_altitude_asl_m")
        if gps is None or asl is None:
            raise DataError(
                f"record {raw.get('id', '?')}: cannot derive altitude without "
                "gps and gps_altitude_asl_m"
            )
        raw["altitude_m"] = round(
            relative_altitude(source, float(asl), float(gps[0]), float(gps[1])), 2
        )
        raw.pop("gps_altitude_asl_m", None)
        n += 1
    tmp = Path(manifest_out)
    tmp.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_manifest(load_manifest(tmp), tmp)  # validate and normalize
    return n
