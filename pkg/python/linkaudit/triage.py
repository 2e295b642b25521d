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

"""Hijackability triage of broken references.
"""

import dataclasses
import enum
import re
import threading
from dataclasses import dataclass
from typing import Tuple

import lsst.pex.config as pexConfig
import lsst.pipe.base as pipeBase
from lsst.utils.timer import timeMethod

from .dnsLookup import NOERROR, NXDOMAIN
from .prober import OutcomeKind
from .urlModel import defaultSuffixRules, registrableDomain

__all__ = ("TriageCause", "TypoKind", "TypoSignal", "DnsState", "TriageVerdict", "NotBroken",
           "detectTypos", "resolveDnsState", "triageBroken", "TriageConfig", "TriageTask")


class TriageCause(enum.Enum):
    EXPIRED_DOMAIN_CANDIDATE = "ExpiredDomainCandidate"
    DANGLING_SUBDOMAIN_CANDIDATE = "DanglingSubdomainCandidate"
    LIBRARY_GONE_CANDIDATE = "LibraryGoneCandidate"
    MALFORMED_URL_TYPO = "MalformedUrlTypo"
    SERVER_ERROR = "ServerError"
    CLIENT_ERROR = "ClientError"
    NETWORK_TRANSIENT = "NetworkTransient"
    UNCLASSIFIED = "Unclassified"


class TypoKind(enum.Enum):
    BAD_DOT = "BadDot"
    MISSING_SEPARATOR = "MissingSeparator"
    SUSPICIOUS_HOST_TOKEN = "SuspiciousHostToken"


class DnsState(enum.Enum):
    RESOLVES = "Resolves"
    NX_DOMAIN = "NxDomain"
    CNAME_TO_NX_DOMAIN = "CnameToNxDomain"
    UNKNOWN = "Unknown"


class NotBroken(ValueError):
    """Raised when triage is asked to classify a working reference."""


@dataclass(frozen=True)
class TypoSignal:
    """A typo found in the raw text of a reference; ``span`` is ``(start, end)``."""
    kind: TypoKind
    span: Tuple[int, int]

    def toDict(self):
        return {"kind": self.kind.value, "span": list(self.span)}

    @classmethod
    def fromDict(cls, data):
        return cls(kind=TypoKind(data["kind"]), span=tuple(data["span"]))


@dataclass(frozen=True)
class TriageVerdict:
    ref: object
    cause: TriageCause
    signals: Tuple[TypoSignal, ...]
    dnsState: DnsState

    def __post_init__(self):
        if self.cause is TriageCause.EXPIRED_DOMAIN_CANDIDATE and self.dnsState is not DnsState.NX_DOMAIN:
            raise ValueError("ExpiredDomainCandidate requires an NXDOMAIN registrable domain")
        if (self.cause is TriageCause.DANGLING_SUBDOMAIN_CANDIDATE
                and self.dnsState is not DnsState.CNAME_TO_NX_DOMAIN):
            raise ValueError("DanglingSubdomainCandidate requires a CNAME to an NXDOMAIN target")


RESOURCE_EXTENSIONS = frozenset(("js", "css", "png", "jpg", "woff2"))
SEPARATOR_SUFFIXES = ("com", "net", "org", "info", "biz", "edu", "gov")

_AUTHORITY_RE = re.compile(r"^(?:[a-zA-Z][a-zA-Z0-9+.\-]*:)?//([^/?#\\]*)")


def _hostSpan(raw):
    """Return ``(start, end)`` of the host inside ``raw``, or `None`."""
    match = _AUTHORITY_RE.match(raw)
    if match is None:
        return None
    start, end = match.span(1)
    authority = raw[start:end]
    at = authority.rfind("@")
    if at >= 0:
        start += at + 1
    hostText = raw[start:end]
    if hostText.startswith("["):
        return None
    colon = hostText.find(":")
    if colon >= 0:
        end = start + colon
    if start == end:
        return None
    return start, end


def _labels(raw, start, end):
    """Yield ``(label, labelStart, labelEnd)`` for the host at ``raw[start:end]``."""
    pos = start
    for label in raw[start:end].split("."):
        yield label, pos, pos + len(label)
        pos += len(label) + 1


def detectTypos(raw, rules=None):
    """Find typo signals in the host portion of a raw reference.

    ``BadDot`` marks doubled, leading or trailing dots; ``MissingSeparator``
    marks a final label that glues a generic suffix to what was meant to be
    the path (``example.comassets``); ``SuspiciousHostToken`` marks a label
    equal to a resource extension.

    Returns
    -------
    signals : `list` of `TypoSignal`
        Ordered by position in ``raw``.
    """
    rules = rules or defaultSuffixRules()
    hostSpan = _hostSpan(raw)
    if hostSpan is None:
        return []
    start, end = hostSpan
    host = raw[start:end]
    signals = []

    for match in re.finditer(r"\.{2,}", host):
        signals.append(TypoSignal(TypoKind.BAD_DOT, (start + match.start(), start + match.end())))
    if host.startswith("."):
        signals.append(TypoSignal(TypoKind.BAD_DOT, (start, start + 1)))
    if host.endswith(".") and not any(s.span[1] == end for s in signals):
        signals.append(TypoSignal(TypoKind.BAD_DOT, (end - 1, end)))

    labels = [item for item in _labels(raw, start, end) if item[0]]
    for label, labelStart, labelEnd in labels:
        if label.lower() in RESOURCE_EXTENSIONS:
            signals.append(TypoSignal(TypoKind.SUSPICIOUS_HOST_TOKEN, (labelStart, labelEnd)))

    if len(labels) >= 2:
        label, labelStart, labelEnd = labels[-1]
        lowered = label.lower()
        if not rules.isPublicSuffix(lowered):
            for suffix in SEPARATOR_SUFFIXES:
                rest = lowered[len(suffix):]
                if lowered.startswith(suffix) and rest and rest.isalnum():
                    signals.append(TypoSignal(TypoKind.MISSING_SEPARATOR, (labelStart, labelEnd)))
                    break

    return sorted(signals, key=lambda s: (s.span, s.kind.value))


def resolveDnsState(host, lookup, rules=None):
    """Classify the DNS situation of a host behind a broken reference.

    Parameters
    ----------
    host : `str`
        Host of the broken reference.
    lookup : `linkaudit.dnsLookup.DnsLookup`
        Resolver to query.

    Returns
    -------
    state : `DnsState`
        ``NX_DOMAIN`` when the registrable domain of ``host`` does not
        resolve; ``CNAME_TO_NX_DOMAIN`` when ``host`` is an alias whose final
        target sits under a registrable domain that does not resolve;
        ``UNKNOWN`` on resolver failure; ``RESOLVES`` otherwise.
    """
    if not host:
        raise ValueError("Host must be non-empty")
    host = host.lower().rstrip(".")
    first = lookup.lookup(host)
    if first.rcode not in (NOERROR, NXDOMAIN):
        return DnsState.UNKNOWN
    if first.cname:
        target, final = lookup.follow(host)
        if final.exists:
            return DnsState.RESOLVES
        if not final.nxdomain:
            return DnsState.UNKNOWN
        domain = lookup.lookup(registrableDomain(target, rules))
        if domain.nxdomain:
            return DnsState.CNAME_TO_NX_DOMAIN
        return DnsState.RESOLVES if domain.exists else DnsState.UNKNOWN
    if first.exists:
        return DnsState.RESOLVES
    domainName = registrableDomain(host, rules)
    domain = first if domainName == host else lookup.lookup(domainName)
    if domain.nxdomain:
        return DnsState.NX_DOMAIN
    return DnsState.RESOLVES if domain.exists else DnsState.UNKNOWN


_VERSION_SEGMENT_RE = re.compile(r"(?:^|[/@])v?\d+\.\d+(?:\.\d+)*(?:[-.+][0-9A-Za-z.]+)?(?=/|$)")
_CDN_PATH_RE = re.compile(r"^/(?:npm|gh|ajax/libs|libs|combine|wp-content/plugins|"
                          r"wp-includes/js|bower_components|node_modules)/", re.IGNORECASE)


def isLibraryPath(path):
    """Return `True` for paths shaped like a versioned package on a CDN."""
    return bool(_VERSION_SEGMENT_RE.search(path) or _CDN_PATH_RE.match(path))


_TRANSIENT_KINDS = (OutcomeKind.TIMEOUT, OutcomeKind.CONNECT_FAILURE, OutcomeKind.TLS_FAILURE)


def triageBroken(result, dnsState, signals):
    """Assign exactly one `TriageCause` to a broken result.

    Causes are tried in a fixed order: typo signals, NXDOMAIN registrable
    domain, dangling CNAME, vanished library (404/410 on a versioned or CDN
    path), other 4xx, 5xx, transient network failure on a resolving host,
    and finally ``UNCLASSIFIED``.

    Raises
    ------
    NotBroken
        If ``result.broken`` is false.
    """
    if not result.broken:
        raise NotBroken(f"{result.ref.url} is not broken")
    signals = tuple(signals)
    outcome = result.outcome
    status = outcome.status if outcome.kind is OutcomeKind.HTTP_RESPONSE else None

    if signals:
        cause = TriageCause.MALFORMED_URL_TYPO
    elif dnsState is DnsState.NX_DOMAIN:
        cause = TriageCause.EXPIRED_DOMAIN_CANDIDATE
    elif dnsState is DnsState.CNAME_TO_NX_DOMAIN:
        cause = TriageCause.DANGLING_SUBDOMAIN_CANDIDATE
    elif status in (404, 410) and isLibraryPath(result.ref.url.path):
        cause = TriageCause.LIBRARY_GONE_CANDIDATE
    elif status is not None and 400 <= status < 500:
        cause = TriageCause.CLIENT_ERROR
    elif status is not None and 500 <= status < 600:
        cause = TriageCause.SERVER_ERROR
    elif outcome.kind in _TRANSIENT_KINDS and dnsState is DnsState.RESOLVES:
        cause = TriageCause.NETWORK_TRANSIENT
    else:
        cause = TriageCause.UNCLASSIFIED
    return TriageVerdict(ref=result.ref, cause=cause, signals=signals, dnsState=dnsState)


class TriageConfig(pexConfig.Config):
    checkDns = pexConfig.Field(dtype=bool, default=True,
                               doc="Resolve the DNS state of hosts behind broken references")


class TriageTask(pipeBase.Task):
    """Attach a `TriageVerdict` to every broken `ProbeResult`.

    DNS states are memoized per host for the lifetime of the task.
    """
    ConfigClass = TriageConfig
    _DefaultName = "triage"

    def __init__(self, lookup=None, rules=None, **kwargs):
        pipeBase.Task.__init__(self, **kwargs)
        self.lookup = lookup
        self.rules = rules
        self._dnsCache = {}
        self._lock = threading.Lock()

    def dnsState(self, host):
        if self.lookup is None or not self.config.checkDns:
            return DnsState.UNKNOWN
        with self._lock:
            if host in self._dnsCache:
                return self._dnsCache[host]
        state = resolveDnsState(host, self.lookup, self.rules)
        with self._lock:
            self._dnsCache[host] = state
        return state

    @timeMethod
    def run(self, results, mapper=map):
        """Triage the broken entries of ``results``.

        Parameters
        ----------
        results : `list` of `linkaudit.prober.ProbeResult`
        mapper : callable, optional
            ``map``-like callable used for the DNS lookups, e.g.
            `linkaudit.prober.ProbeTask.map` to share the probe pool.

        Returns
        -------
        results : `list` of `linkaudit.prober.ProbeResult`
            Same order, broken entries carrying ``verdict``.
        """
        hosts = sorted({r.ref.url.host for r in results if r.broken})
        states = dict(zip(hosts, mapper(self.dnsState, hosts)))
        triaged = []
        for result in results:
            if result.broken:
                verdict = triageBroken(result, states[result.ref.url.host],
                                       detectTypos(result.ref.rawText, self.rules))
                result = dataclasses.replace(result, verdict=verdict)
            triaged.append(result)
        self.log.verbose("Triaged %d broken of %d results", sum(r.broken for r in results), len(results))
        return triaged
