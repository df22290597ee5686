"""Optimal-duration providers and the caching/retry layer in front of them.

A provider answers: what is the best-route duration from an origin cluster
centroid to a school, for a mode class and a traffic regime? Implementations
here: a CSV table passthrough and an HTTP directions client with disk cache,
request throttling, and retry. The simulator-backed provider lives next to
the simulator. All providers sit behind `lookup_optimal`, which memoizes one
upstream call per (centroid, school, mode, regime) with single-flight
semantics under concurrency.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol

from . import geo
from .errors import ConfigurationError, ProviderError
from .geo import GeoPoint
from .metrics import (
    STATUS_NOT_FOUND,
    STATUS_OK,
    STATUS_REPOSITIONED,
    STATUS_TRANSIENT,
    OptimalDurationTable,
)

SNAP_LIMIT_M = 1000.0
RETRY_ATTEMPTS = 3


class ProviderTransportError(ProviderError):
    """Transient transport failure; the lookup layer retries these."""


@dataclass(frozen=True)
class OptimalQuery:
    location_id: str
    centroid: GeoPoint
    school_id: str
    school_location: GeoPoint
    mode_class: str
    regime: str  # heavy | light | transit

    def cache_key(self) -> tuple:
        return (
            round(self.centroid.lat, 6),
            round(self.centroid.lon, 6),
            self.school_id,
            self.mode_class,
            self.regime,
        )


@dataclass(frozen=True)
class QueryOutcome:
    seconds: Optional[float]
    status: str


class DurationProvider(Protocol):
    def query(self, q: OptimalQuery) -> QueryOutcome: ...


class _SingleFlight:
    """Concurrent memo map: one computation per key, others wait for it."""

    def __init__(self):
        self._lock = threading.Lock()
        self._done: dict = {}
        self._inflight: dict = {}

    def get_or_compute(self, key, fn: Callable[[], QueryOutcome]) -> QueryOutcome:
        while True:
            with self._lock:
                if key in self._done:
                    return self._done[key]
                event = self._inflight.get(key)
                if event is None:
                    event = threading.Event()
                    self._inflight[key] = event
                    owner = True
                else:
                    owner = False
            if owner:
                try:
                    value = fn()
                except BaseException:
                    with self._lock:
                        self._inflight.pop(key, None)
                    event.set()
                    raise
                with self._lock:
                    self._done[key] = value
                    self._inflight.pop(key, None)
                event.set()
                return value
            event.wait()


class OptimalLookup:
    """Caching, retrying front end over a DurationProvider.

    Transport failures are retried with exponential backoff (3 attempts) and
    then surface as a distinct transient-failure status, never as not_found.
    """

    def __init__(self, provider: DurationProvider, backoff_base_s: float = 0.5,
                 sleep: Callable[[float], None] = time.sleep):
        self.provider = provider
        self.backoff_base_s = backoff_base_s
        self._sleep = sleep
        self._cache = _SingleFlight()
        self.upstream_calls = 0
        self._count_lock = threading.Lock()

    def lookup(self, q: OptimalQuery) -> QueryOutcome:
        return self._cache.get_or_compute(q.cache_key(), lambda: self._query_with_retry(q))

    def _query_with_retry(self, q: OptimalQuery) -> QueryOutcome:
        with self._count_lock:
            self.upstream_calls += 1
        last_error: Optional[Exception] = None
        for attempt in range(RETRY_ATTEMPTS):
            try:
                return self.provider.query(q)
            except ProviderTransportError as exc:
                last_error = exc
                if attempt + 1 < RETRY_ATTEMPTS:
                    self._sleep(self.backoff_base_s * (2 ** attempt))
        return QueryOutcome(None, STATUS_TRANSIENT)


def lookup_optimal(lookup: OptimalLookup, q: OptimalQuery) -> QueryOutcome:
    """One cached provider query per (centroid, school, mode, regime)."""
    return lookup.lookup(q)


class FileTableProvider:
    """Passthrough to a pre-collected optimal-duration CSV table."""

    def __init__(self, table: OptimalDurationTable):
        self.table = table

    @classmethod
    def from_csv(cls, path) -> "FileTableProvider":
        return cls(OptimalDurationTable.read_csv(path))

    def query(self, q: OptimalQuery) -> QueryOutcome:
        entry = self.table.lookup(q.location_id, q.school_id, q.mode_class)
        if entry is None:
            return QueryOutcome(None, STATUS_NOT_FOUND)
        if entry.status != STATUS_OK:
            return QueryOutcome(None, entry.status)
        value = entry.get(q.regime)
        if value is None:
            return QueryOutcome(None, STATUS_NOT_FOUND)
        return QueryOutcome(value, STATUS_OK)


class RateLimiter:
    """Blocks so upstream calls stay under a requests-per-second budget."""

    def __init__(self, rps: float, clock=time.monotonic, sleep=time.sleep):
        if rps <= 0:
            raise ConfigurationError("requests-per-second must be positive")
        self.min_interval = 1.0 / rps
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next_free = 0.0

    def wait(self) -> None:
        with self._lock:
            now = self._clock()
            delay = self._next_free - now
            self._next_free = max(now, self._next_free) + self.min_interval
        if delay > 0:
            self._sleep(delay)


class DiskCache:
    """JSON blobs on disk keyed by the canonical request form."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        digest = hashlib.sha256(key.encode("utf-8")).hexdigest()
        return self.directory / f"{digest}.json"

    def get(self, key: str) -> Optional[dict]:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            return None

    def put(self, key: str, value: dict) -> None:
        self._path(key).write_text(json.dumps(value, sort_keys=True), encoding="utf-8")


def _default_transport(url: str, params: dict, timeout: float) -> dict:
    import requests

    try:
        resp = requests.get(url, params=params, timeout=timeout)
    except requests.RequestException as exc:
        raise ProviderTransportError(str(exc)) from exc
    if resp.status_code != 200:
        raise ProviderTransportError(f"HTTP {resp.status_code}")
    try:
        return resp.json()
    except ValueError as exc:
        raise ProviderTransportError(f"bad JSON body: {exc}") from exc


class HttpDirectionsProvider:
    """Directions web-service client (Google-style request/response shape).

    GET {base_url}?origin=lat,lon&destination=lat,lon&mode=...&departure_time=...
    with the API key read from an environment variable. Responses are cached
    on disk keyed by the canonical request (key excluded), and upstream calls
    are throttled to a configurable requests-per-second budget. The heavy
    regime takes the maximum over the configured rush-hour departure times;
    light and transit use single queries.
    """

    def __init__(
        self,
        base_url: str,
        api_key_env: str = "POAKIT_DIRECTIONS_API_KEY",
        cache_dir=None,
        rps: float = 10.0,
        heavy_departures: tuple[int, ...] = (25200, 28800),  # 07:00 and 08:00 local
        light_departure: int = 25200,
        timeout_s: float = 10.0,
        transport: Callable[[str, dict, float], dict] = _default_transport,
        clock=time.monotonic,
        sleep=time.sleep,
    ):
        key = os.environ.get(api_key_env, "")
        if not key:
            raise ConfigurationError(
                f"directions provider selected but {api_key_env} is not set"
            )
        self.base_url = base_url
        self.api_key = key
        self.cache = DiskCache(cache_dir) if cache_dir else None
        self.limiter = RateLimiter(rps, clock=clock, sleep=sleep)
        self.heavy_departures = heavy_departures
        self.light_departure = light_departure
        self.timeout_s = timeout_s
        self.transport = transport

    def query(self, q: OptimalQuery) -> QueryOutcome:
        if q.regime == "heavy":
            outcomes = [self._single(q, "driving", dep) for dep in self.heavy_departures]
            failed = [o for o in outcomes if o.status != STATUS_OK]
            if failed:
                return failed[0]
            return QueryOutcome(max(o.seconds for o in outcomes), STATUS_OK)
        if q.regime == "light":
            return self._single(q, "driving", self.light_departure)
        return self._single(q, "transit", self.light_departure)

    def _single(self, q: OptimalQuery, mode: str, departure_s: int) -> QueryOutcome:
        params = {
            "origin": f"{q.centroid.lat:.6f},{q.centroid.lon:.6f}",
            "destination": f"{q.school_location.lat:.6f},{q.school_location.lon:.6f}",
            "mode": mode,
            "departure_time": str(departure_s),
        }
        cache_key = json.dumps(params, sort_keys=True)
        body = self.cache.get(cache_key) if self.cache else None
        if body is None:
            self.limiter.wait()
            body = self.transport(self.base_url, {**params, "key": self.api_key}, self.timeout_s)
            if self.cache:
                self.cache.put(cache_key, body)
        return self._parse(q, body)

    def _parse(self, q: OptimalQuery, body: dict) -> QueryOutcome:
        status = body.get("status", "")
        if status in ("NOT_FOUND", "ZERO_RESULTS"):
            return QueryOutcome(None, STATUS_NOT_FOUND)
        if status != "OK":
            raise ProviderTransportError(f"service status {status!r}")
        try:
            leg = body["routes"][0]["legs"][0]
            duration = leg.get("duration_in_traffic", leg["duration"])["value"]
            start = leg.get("start_location")
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderTransportError(f"malformed response: {exc}") from exc
        if start is not None:
            snapped = GeoPoint(float(start["lat"]), float(start["lng"]))
            if geo.geodesic_distance(snapped, q.centroid) > SNAP_LIMIT_M:
                return QueryOutcome(None, STATUS_REPOSITIONED)
        return QueryOutcome(float(duration), STATUS_OK)
