# This file is part of link_audit.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.

import contextlib
import enum
import re
import socket
import threading
import time
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Optional
from urllib.parse import urlunsplit

import requests
import urllib3

import lsst.pex.config as pexConfig
import lsst.pipe.base as pipeBase
from lsst.utils.timer import timeMethod

from .htmlExtractor import DYNAMIC_CATEGORIES, categoryFromContentType
from .urlModel import normalizeUrl
from .version import __version__

__all__ = ("ScanConfig", "OutcomeKind", "ProbeOutcome", "ProbeResult", "classifyBroken",
           "HostLimiter", "ProbeTask", "ALLOWED_STATUSES", "DEFAULT_USER_AGENT")

ALLOWED_STATUSES = frozenset((200, 301, 302, 304))
REDIRECT_STATUSES = frozenset((301, 302, 303, 307, 308))
DEFAULT_USER_AGENT = (f"link-audit/{__version__} (broken external resource survey; "
                      "opt-out: https://github.com/link-audit/link_audit#opting-out)")


class ScanConfig(pexConfig.Config):

    concurrency = pexConfig.RangeField(dtype=int, default=64, min=1,
                                       doc="Maximum number of requests in flight")
    perHostLimit = pexConfig.RangeField(dtype=int, default=2, min=1,
                                        doc="Maximum number of requests in flight to one host")
    timeout = pexConfig.RangeField(dtype=float, default=15.0, min=0.0, inclusiveMin=False,
                                   doc="Connect and read timeout of one request, in seconds")
    userAgent = pexConfig.Field(dtype=str, default=DEFAULT_USER_AGENT,
                                doc="User-Agent header sent with every request")
    retries = pexConfig.RangeField(dtype=int, default=1, min=0,
                                   doc="Re-attempts after a network error; HTTP statuses are never retried")
    homepageSchemes = pexConfig.ListField(dtype=str, default=["https", "http"],
                                          doc="Schemes tried in order to fetch a homepage from a bare domain")
    maxRedirects = pexConfig.RangeField(dtype=int, default=5, min=0,
                                        doc="Redirects followed when fetching a homepage (never for probes)")
    maxPageBytes = pexConfig.RangeField(dtype=int, default=5*1024*1024, min=1,
                                        doc="Homepage bodies are truncated to this many bytes")
    batchSize = pexConfig.RangeField(dtype=int, default=64, min=1,
                                     doc="Sites fetched, probed and written together")

    def validate(self):
        super().validate()
        if self.perHostLimit > self.concurrency:
            raise pexConfig.FieldValidationError(ScanConfig.perHostLimit, self,
                                                 "perHostLimit must not exceed concurrency")
        if not self.homepageSchemes or any(s not in ("http", "https") for s in self.homepageSchemes):
            raise pexConfig.FieldValidationError(ScanConfig.homepageSchemes, self,
                                                 "homepageSchemes must be a non-empty list of http/https")


class OutcomeKind(enum.Enum):
    HTTP_RESPONSE = "HttpResponse"
    DNS_FAILURE = "DnsFailure"
    CONNECT_FAILURE = "ConnectFailure"
    TLS_FAILURE = "TlsFailure"
    TIMEOUT = "Timeout"


NETWORK_ERRORS = (OutcomeKind.DNS_FAILURE, OutcomeKind.CONNECT_FAILURE, OutcomeKind.TLS_FAILURE,
                  OutcomeKind.TIMEOUT)


@dataclass(frozen=True)
class ProbeOutcome:
    url: object
    kind: OutcomeKind
    status: Optional[int] = None
    contentType: Optional[str] = None
    latencyMs: float = 0.0
    fetchedAt: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    def __post_init__(self):
        if (self.status is not None) != (self.kind is OutcomeKind.HTTP_RESPONSE):
            raise ValueError(f"status must be set iff kind is HttpResponse: {self.kind}, {self.status}")
        # any three-digit code; non-standard ones such as 999 are broken responses
        if self.status is not None and not 100 <= self.status <= 999:
            raise ValueError(f"HTTP status out of range: {self.status}")
        if self.latencyMs < 0:
            raise ValueError("latency must be non-negative")


def classifyBroken(outcome):
    """Return `True` unless the outcome is an HTTP 200, 301, 302 or 304.

    Network failures of every kind are broken.
    """
    return not (outcome.kind is OutcomeKind.HTTP_RESPONSE and outcome.status in ALLOWED_STATUSES)


@dataclass(frozen=True)
class ProbeResult:
    """A reference together with the outcome of probing its URL.

    ``verdict`` is attached by triage for broken results.
    """
    ref: object
    outcome: ProbeOutcome
    broken: bool
    headerCategory: Optional[object] = None
    categoryMismatch: bool = False
    verdict: Optional[object] = None

    @classmethod
    def fromOutcome(cls, ref, outcome):
        headerCategory = None
        mismatch = False
        if outcome.contentType:
            headerCategory = categoryFromContentType(outcome.contentType)
            mismatch = ref.category not in DYNAMIC_CATEGORIES and headerCategory != ref.category
        return cls(ref=ref, outcome=outcome, broken=classifyBroken(outcome),
                   headerCategory=headerCategory, categoryMismatch=mismatch)


class HostLimiter:
    """Caps the number of concurrent requests to each host."""

    def __init__(self, perHostLimit):
        self.perHostLimit = perHostLimit
        self._lock = threading.Lock()
        self._semaphores = defaultdict(lambda: threading.BoundedSemaphore(self.perHostLimit))

    @contextlib.contextmanager
    def limit(self, host):
        with self._lock:
            semaphore = self._semaphores[host]
        with semaphore:
            yield


class _ResolutionFailure(Exception):
    pass


_DNS_MESSAGE_RE = re.compile(r"name or service not known|getaddrinfo failed|nodename nor servname|"
                             r"temporary failure in name resolution|no address associated",
                             re.IGNORECASE)


def _isNameResolutionError(exc):
    """Search an exception chain for a failed name resolution."""
    pending = [exc]
    seen = set()
    while pending:
        e = pending.pop()
        if e is None or id(e) in seen:
            continue
        seen.add(id(e))
        if isinstance(e, socket.gaierror) or type(e).__name__ == "NameResolutionError":
            return True
        if _DNS_MESSAGE_RE.search(str(e)):
            return True
        pending.extend([e.__cause__, e.__context__, getattr(e, "reason", None)])
        pending.extend(a for a in getattr(e, "args", ()) if isinstance(a, BaseException))
    return False


def _failureKind(exc):
    if isinstance(exc, _ResolutionFailure):
        return OutcomeKind.DNS_FAILURE
    if isinstance(exc, requests.exceptions.SSLError):
        return OutcomeKind.TLS_FAILURE
    if isinstance(exc, (requests.exceptions.Timeout, urllib3.exceptions.TimeoutError, socket.timeout)):
        return OutcomeKind.TIMEOUT
    if _isNameResolutionError(exc):
        return OutcomeKind.DNS_FAILURE
    if "timed out" in str(exc).lower():
        return OutcomeKind.TIMEOUT
    return OutcomeKind.CONNECT_FAILURE


_NETWORK_EXCEPTIONS = (_ResolutionFailure, requests.exceptions.RequestException,
                       urllib3.exceptions.HTTPError, OSError)


class ProbeTask(pipeBase.Task):
    """Fetch URLs over HTTP with bounded concurrency and per-host politeness.

    Parameters
    ----------
    lookup : `linkaudit.dnsLookup.DnsLookup`, optional
        When given, name resolution is taken from it: NXDOMAIN answers become
        `OutcomeKind.DNS_FAILURE` without network traffic, and pinned
        addresses redirect connections while keeping the ``Host`` header.
        Otherwise the system resolver is used.
    **kwargs
        Passed to `lsst.pipe.base.Task`.
    """
    ConfigClass = ScanConfig
    _DefaultName = "probe"

    def __init__(self, lookup=None, **kwargs):
        pipeBase.Task.__init__(self, **kwargs)
        self.lookup = lookup
        self.limiter = HostLimiter(self.config.perHostLimit)
        self._local = threading.local()
        self._pool = None

    @property
    def pool(self):
        if self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.config.concurrency,
                                            thread_name_prefix="probe")
        return self._pool

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def map(self, func, items):
        """Run ``func`` over ``items`` on the worker pool, preserving order."""
        return list(self.pool.map(func, items))

    def _session(self):
        session = getattr(self._local, "session", None)
        if session is None:
            session = requests.Session()
            session.headers["User-Agent"] = self.config.userAgent
            self._local.session = session
        return session

    def _connectTarget(self, url):
        if self.lookup is None:
            return str(url), {}
        _, answer = self.lookup.follow(url.host)
        if not answer.exists:
            raise _ResolutionFailure(f"{url.host}: {answer.rcode}")
        if answer.address is None:
            return str(url), {}
        netloc = answer.address
        if ":" not in netloc and url.port is not None:
            netloc = f"{netloc}:{url.port}"
        target = urlunsplit((url.scheme, netloc, url.path, url.query or "", ""))
        return target, {"Host": url.netloc}

    def _attempt(self, url, readBody=False):
        fetchedAt = datetime.now(timezone.utc)
        start = time.monotonic()
        body = None
        location = None
        try:
            target, headers = self._connectTarget(url)
            with self.limiter.limit(url.host):
                response = self._session().get(target, headers=headers, allow_redirects=False,
                                               stream=True, timeout=self.config.timeout)
                try:
                    if readBody:
                        body = self._readBody(response)
                finally:
                    response.close()
        except _NETWORK_EXCEPTIONS as e:
            kind = _failureKind(e)
            self.log.debug("%s: %s (%s)", url, kind.value, e)
            outcome = ProbeOutcome(url=url, kind=kind, latencyMs=1000*(time.monotonic() - start),
                                   fetchedAt=fetchedAt)
            return pipeBase.Struct(outcome=outcome, body=None, location=None)
        location = response.headers.get("Location")
        outcome = ProbeOutcome(url=url, kind=OutcomeKind.HTTP_RESPONSE, status=response.status_code,
                               contentType=response.headers.get("Content-Type") or None,
                               latencyMs=1000*(time.monotonic() - start), fetchedAt=fetchedAt)
        return pipeBase.Struct(outcome=outcome, body=body, location=location)

    def _readBody(self, response):
        chunks = []
        size = 0
        for chunk in response.iter_content(chunk_size=65536):
            chunks.append(chunk)
            size += len(chunk)
            if size >= self.config.maxPageBytes:
                self.log.debug("Truncating body of %s at %d bytes", response.url, size)
                break
        data = b"".join(chunks)[:self.config.maxPageBytes]
        return data.decode(response.encoding or "utf-8", errors="replace")

    def _fetch(self, url, readBody=False):
        result = self._attempt(url, readBody)
        for i in range(self.config.retries):
            if result.outcome.kind is OutcomeKind.HTTP_RESPONSE:
                break
            self.log.trace("Retrying %s after %s (%d)", url, result.outcome.kind.value, i + 1)
            result = self._attempt(url, readBody)
        return result

    def probe(self, url):
        """Issue one GET for ``url`` without following redirects.

        The body is discarded unread; network errors are retried at most
        ``config.retries`` times.

        Returns
        -------
        outcome : `ProbeOutcome`
        """
        return self._fetch(url).outcome

    @timeMethod
    def probeAll(self, refs):
        """Probe every reference, fetching each distinct URL once.

        Parameters
        ----------
        refs : `list` of `linkaudit.htmlExtractor.ResourceRef`

        Returns
        -------
        results : `list` of `ProbeResult`
            One result per reference, in input order.
        """
        urls = list(dict.fromkeys(ref.url for ref in refs))
        if not urls:
            return []
        self.log.verbose("Probing %d distinct URLs for %d references", len(urls), len(refs))
        outcomes = dict(zip(urls, self.map(self.probe, urls)))
        return [ProbeResult.fromOutcome(ref, outcomes[ref.url]) for ref in refs]

    def fetchPage(self, url):
        """Fetch a homepage, following redirects up to ``config.maxRedirects``.

        Returns
        -------
        result : `lsst.pipe.base.Struct`
            ``outcome`` (`ProbeOutcome` of the last hop), ``finalUrl``
            (`AbsoluteUrl`) and ``body`` (`str` or `None`).
        """
        current = url
        for hop in range(self.config.maxRedirects + 1):
            result = self._fetch(current, readBody=True)
            outcome = result.outcome
            if outcome.kind is not OutcomeKind.HTTP_RESPONSE or outcome.status not in REDIRECT_STATUSES:
                break
            if not result.location or hop == self.config.maxRedirects:
                break
            try:
                current = normalizeUrl(result.location, current)
            except ValueError as e:
                self.log.debug("Bad redirect from %s: %s", current, e)
                break
        return pipeBase.Struct(outcome=outcome, finalUrl=current, body=result.body)
