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

"""Site lists, the append-only results file and per-homepage profiles.

The results file holds one JSON object per line. The ``record`` key tells
the kinds apart:

``page``
    One per attempted domain: whether the homepage could be fetched.
``ref``
    One probed reference with its outcome and triage verdict.
``rejected``
    A reference whose text could not be turned into a URL.
``profile``
    A prebuilt `HomepageProfile`, as written by `writeProfiles`.
"""

import csv
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict

import numpy as np

import lsst.pipe.base as pipeBase
from lsst.utils.logging import getLogger

from .htmlExtractor import ExtractionOrigin, MalformedRecord, ResourceCategory, ResourceRef
from .prober import OutcomeKind, ProbeOutcome, ProbeResult
from .triage import DnsState, TriageCause, TriageVerdict, TypoSignal
from .urlModel import AbsoluteUrl, Scope

__all__ = ("MissingColumn", "EmptyFile", "NotEnoughBroken", "SiteEntry", "HomepageProfile",
           "loadSiteList", "toRecord", "pageRecord", "rejectedRecord", "appendRecords",
           "appendResults", "readRecords", "completedDomains", "trimIncompleteSite", "fromRecord",
           "readResults", "ProfileBuilder", "buildProfiles", "buildProfilesFromFile", "writeProfiles",
           "sampleForReview")

logger = getLogger("linkaudit.corpusStore")

_REF_FIELDS = ("domain", "scope", "category", "broken")


class MissingColumn(ValueError):
    """Raised when a site list has no Domain column."""


class EmptyFile(ValueError):
    """Raised when a site list has no data rows."""


class NotEnoughBroken(ValueError):
    """Raised when a review sample asks for more broken results than exist."""


@dataclass(frozen=True)
class SiteEntry:
    rank: int
    domain: str


def _categoryCounts():
    return {category: 0 for category in ResourceCategory}


@dataclass
class HomepageProfile:
    """Reference counts of one homepage.

    ``perCategory`` and ``brokenPerCategory`` cover internal and external
    references; the ``external*`` maps restrict them to external ones.
    ``hostExternalCount`` counts references on another host, whatever their
    registrable domain.
    """
    domain: str
    totalRefs: int = 0
    internalCount: int = 0
    externalCount: int = 0
    perCategory: Dict[ResourceCategory, int] = field(default_factory=_categoryCounts)
    brokenCount: int = 0
    brokenPerCategory: Dict[ResourceCategory, int] = field(default_factory=_categoryCounts)
    hostExternalCount: int = 0
    externalBrokenCount: int = 0
    externalPerCategory: Dict[ResourceCategory, int] = field(default_factory=_categoryCounts)
    externalBrokenPerCategory: Dict[ResourceCategory, int] = field(default_factory=_categoryCounts)

    @property
    def hasBroken(self):
        return self.brokenCount >= 1

    def add(self, category, scope, broken, hostExternal=False):
        self.totalRefs += 1
        self.perCategory[category] += 1
        external = scope is Scope.EXTERNAL
        if external:
            self.externalCount += 1
            self.externalPerCategory[category] += 1
        else:
            self.internalCount += 1
        if hostExternal:
            self.hostExternalCount += 1
        if broken:
            self.brokenCount += 1
            self.brokenPerCategory[category] += 1
            if external:
                self.externalBrokenCount += 1
                self.externalBrokenPerCategory[category] += 1

    def checkInvariants(self):
        assert self.internalCount + self.externalCount == self.totalRefs
        assert sum(self.perCategory.values()) == self.totalRefs
        assert sum(self.externalPerCategory.values()) == self.externalCount
        assert self.brokenCount <= self.totalRefs
        assert self.externalBrokenCount <= min(self.brokenCount, self.externalCount)
        for category in ResourceCategory:
            assert self.brokenPerCategory[category] <= self.perCategory[category]
            assert self.externalBrokenPerCategory[category] <= self.externalPerCategory[category]

    def toDict(self):
        def counts(mapping):
            return {c.value: n for c, n in mapping.items() if n}
        return {
            "record": "profile",
            "domain": self.domain,
            "total_refs": self.totalRefs,
            "internal_count": self.internalCount,
            "external_count": self.externalCount,
            "per_category": counts(self.perCategory),
            "broken_count": self.brokenCount,
            "broken_per_category": counts(self.brokenPerCategory),
            "host_external_count": self.hostExternalCount,
            "external_broken_count": self.externalBrokenCount,
            "external_per_category": counts(self.externalPerCategory),
            "external_broken_per_category": counts(self.externalBrokenPerCategory),
        }

    @classmethod
    def fromDict(cls, data):
        def counts(mapping):
            result = _categoryCounts()
            for name, n in (mapping or {}).items():
                result[ResourceCategory(name)] = int(n)
            return result
        try:
            return cls(domain=data["domain"], totalRefs=int(data["total_refs"]),
                       internalCount=int(data["internal_count"]),
                       externalCount=int(data["external_count"]),
                       perCategory=counts(data.get("per_category")),
                       brokenCount=int(data.get("broken_count", 0)),
                       brokenPerCategory=counts(data.get("broken_per_category")),
                       hostExternalCount=int(data.get("host_external_count", 0)),
                       externalBrokenCount=int(data.get("external_broken_count", 0)),
                       externalPerCategory=counts(data.get("external_per_category")),
                       externalBrokenPerCategory=counts(data.get("external_broken_per_category")))
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedRecord(f"Bad profile record: {e}") from e


def _cleanDomain(text):
    domain = (text or "").strip().lower().rstrip(".")
    if not domain or "://" in domain or "/" in domain or " " in domain:
        return None
    return domain


def loadSiteList(path, topN):
    """Read the first ``topN`` sites of a ranked list.

    Parameters
    ----------
    path : `str`
        Comma-separated file with a header row. A ``Domain`` column is
        required (any case); the rank comes from ``GlobalRank`` if present,
        else from the first column, else from the row position when the
        first column is the domain itself.
    topN : `int`
        Number of entries to return.

    Returns
    -------
    sites : `list` of `SiteEntry`
        Sorted by rank. Duplicate domains keep their lowest rank.

    Raises
    ------
    MissingColumn
        If there is no Domain column.
    EmptyFile
        If the file has no rows below the header.
    """
    if topN < 1:
        raise ValueError(f"topN must be positive, got {topN}")
    with open(path, newline="", encoding="utf-8-sig") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path} is empty")
        names = [h.strip().lower() for h in header]
        if "domain" not in names:
            raise MissingColumn(f"{path} has no Domain column: {header}")
        domainCol = names.index("domain")
        if "globalrank" in names:
            rankCol = names.index("globalrank")
        else:
            rankCol = 0 if domainCol != 0 else None

        best = {}
        ranks = set()
        nRows = 0
        nMalformed = 0
        for position, row in enumerate(reader, start=1):
            if not row or not any(cell.strip() for cell in row):
                continue
            nRows += 1
            try:
                domain = _cleanDomain(row[domainCol])
                rank = int(row[rankCol]) if rankCol is not None else position
            except (IndexError, ValueError):
                domain = None
            if domain is None or rank < 1 or (rank in ranks and best.get(domain) != rank):
                nMalformed += 1
                continue
            if domain in best:
                if rank < best[domain]:
                    ranks.discard(best[domain])
                    best[domain] = rank
                    ranks.add(rank)
                continue
            best[domain] = rank
            ranks.add(rank)
    if nRows == 0:
        raise EmptyFile(f"{path} has a header but no rows")
    if nMalformed:
        logger.warning("Skipped %d malformed rows of %s", nMalformed, path)
    sites = sorted((SiteEntry(rank, domain) for domain, rank in best.items()), key=lambda s: s.rank)
    return sites[:topN]


def toRecord(result, domain=None):
    """Serialize a `ProbeResult` to a ``ref`` record.

    ``domain`` is the site-list domain the homepage was reached from; it
    defaults to the host of the origin page.
    """
    ref = result.ref
    outcome = result.outcome
    verdict = result.verdict
    return {
        "record": "ref",
        "domain": domain or ref.originPage.host,
        "page_url": str(ref.originPage),
        "url": str(ref.url),
        "raw_text": ref.rawText,
        "category": ref.category.value,
        "scope": ref.scope.value,
        "host_external": ref.hostExternal,
        "extraction_origin": ref.extractionOrigin.value,
        "outcome_kind": outcome.kind.value,
        "status": outcome.status,
        "content_type": outcome.contentType,
        "latency_ms": round(outcome.latencyMs, 3),
        "fetched_at": outcome.fetchedAt.isoformat(),
        "broken": result.broken,
        "header_category": result.headerCategory.value if result.headerCategory else None,
        "category_mismatch": result.categoryMismatch,
        "triage_cause": verdict.cause.value if verdict else None,
        "typo_signals": [s.toDict() for s in verdict.signals] if verdict else [],
        "dns_state": verdict.dnsState.value if verdict else None,
    }


def pageRecord(domain, pageUrl, outcome, refCount, ok=None):
    """Record one homepage fetch; ``outcome`` may be `None` if no scheme was tried.

    ``ok`` defaults to whether the fetch ended in a 200 response.
    """
    if ok is None:
        ok = (outcome is not None and outcome.kind is OutcomeKind.HTTP_RESPONSE
              and outcome.status == 200)
    return {
        "record": "page",
        "domain": domain,
        "page_url": str(pageUrl) if pageUrl is not None else None,
        "ok": ok,
        "outcome_kind": outcome.kind.value if outcome is not None else None,
        "status": outcome.status if outcome is not None else None,
        "ref_count": refCount,
    }


def rejectedRecord(domain, pageUrl, raw, reason, signals):
    return {
        "record": "rejected",
        "domain": domain,
        "page_url": str(pageUrl),
        "raw_text": raw,
        "reason": reason,
        "typo_signals": [s.toDict() for s in signals],
        "triage_cause": TriageCause.MALFORMED_URL_TYPO.value if signals else None,
    }


def appendRecords(path, records):
    """Append records to a results file, one JSON line each.

    A final line left without its newline by an interrupted write is
    terminated first, so the fragment stays a single malformed line.

    Returns
    -------
    count : `int`
        Number of lines written. With no records the file is not touched.
    """
    lines = [json.dumps(record, sort_keys=True) + "\n" for record in records]
    if not lines:
        return 0
    torn = False
    if os.path.exists(path) and os.path.getsize(path) > 0:
        with open(path, "rb") as f:
            f.seek(-1, os.SEEK_END)
            torn = f.read(1) != b"\n"
    with open(path, "a", encoding="utf-8") as f:
        if torn:
            logger.warning("%s ends with a partial line; terminating it", path)
            f.write("\n")
        for line in lines:
            f.write(line)
        f.flush()
        os.fsync(f.fileno())
    return len(lines)


def appendResults(path, results, domain=None):
    """Append one ``ref`` record per `ProbeResult`; returns the count written."""
    return appendRecords(path, [toRecord(result, domain) for result in results])


def readRecords(path, onError=None):
    """Yield the records of a results file in order.

    Lines that are not JSON objects (such as a line cut short by a crash)
    are skipped; ``onError(lineNumber, exception)`` is called for each.
    """
    with open(path, encoding="utf-8") as f:
        for lineNumber, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise MalformedRecord("record is not an object")
            except ValueError as e:
                if onError is not None:
                    onError(lineNumber, e)
                else:
                    logger.warning("%s:%d: skipping malformed line (%s)", path, lineNumber, e)
                continue
            yield record


def completedDomains(path):
    """Domains that already have a ``page`` record; empty if ``path`` does not exist."""
    if not os.path.exists(path):
        return set()
    return {r["domain"] for r in readRecords(path) if r.get("record") == "page" and "domain" in r}


def trimIncompleteSite(path):
    """Cut a results file back to the end of its last ``page`` record.

    A scan writes the ``page`` record of a site after its other records, so
    whatever follows the last one belongs to a site that was interrupted
    and will be scanned again.

    Returns
    -------
    dropped : `int`
        Number of lines removed; 0 if ``path`` does not exist.
    """
    if not os.path.exists(path):
        return 0
    keep = 0
    offset = 0
    dropped = 0
    with open(path, "rb") as f:
        for line in f:
            offset += len(line)
            dropped += 1
            if not line.endswith(b"\n"):
                continue
            try:
                record = json.loads(line)
            except ValueError:
                continue
            if isinstance(record, dict) and record.get("record") == "page":
                keep = offset
                dropped = 0
    if keep < offset:
        logger.warning("%s: dropping %d lines of an interrupted site", path, dropped)
        with open(path, "r+b") as f:
            f.truncate(keep)
            f.flush()
            os.fsync(f.fileno())
    return dropped


def fromRecord(record):
    """Rebuild a `ProbeResult`, with its verdict, from a ``ref`` record."""
    try:
        origin = AbsoluteUrl.parse(record["page_url"])
        url = AbsoluteUrl.parse(record["url"])
        ref = ResourceRef(originPage=origin, url=url, category=ResourceCategory(record["category"]),
                          scope=Scope(record["scope"]),
                          extractionOrigin=ExtractionOrigin(record["extraction_origin"]),
                          rawText=record.get("raw_text") or str(url),
                          hostExternal=bool(record.get("host_external", False)))
        outcome = ProbeOutcome(url=url, kind=OutcomeKind(record["outcome_kind"]),
                               status=record.get("status"), contentType=record.get("content_type"),
                               latencyMs=float(record.get("latency_ms") or 0.0),
                               fetchedAt=datetime.fromisoformat(record["fetched_at"]))
        verdict = None
        if record.get("triage_cause"):
            verdict = TriageVerdict(ref=ref, cause=TriageCause(record["triage_cause"]),
                                    signals=tuple(TypoSignal.fromDict(s)
                                                  for s in record.get("typo_signals") or []),
                                    dnsState=DnsState(record.get("dns_state") or "Unknown"))
        headerCategory = record.get("header_category")
        return ProbeResult(ref=ref, outcome=outcome, broken=bool(record["broken"]),
                           headerCategory=ResourceCategory(headerCategory) if headerCategory else None,
                           categoryMismatch=bool(record.get("category_mismatch", False)),
                           verdict=verdict)
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedRecord(f"Bad ref record: {e}") from e


def readResults(path):
    """Return every ``ref`` record of a results file as a `ProbeResult`."""
    results = []
    for record in readRecords(path):
        if record.get("record", "ref") != "ref":
            continue
        try:
            results.append(fromRecord(record))
        except MalformedRecord as e:
            logger.warning("Skipping record in %s: %s", path, e)
    return results


class ProfileBuilder:
    """Aggregate a stream of records into `HomepageProfile` objects."""

    def __init__(self):
        self._profiles = {}
        self.unreachable = set()
        self.nMalformed = 0

    def _profile(self, domain):
        if domain not in self._profiles:
            self._profiles[domain] = HomepageProfile(domain=domain)
        return self._profiles[domain]

    def add(self, record):
        """Add one record (a `dict` or a `ProbeResult`).

        Raises
        ------
        MalformedRecord
            If a ``ref`` record lacks a field or carries an unknown value.
        """
        if isinstance(record, ProbeResult):
            record = toRecord(record)
        kind = record.get("record", "ref")
        if kind == "page":
            if record.get("ok"):
                self._profile(record["domain"])
            else:
                self.unreachable.add(record["domain"])
        elif kind == "profile":
            profile = HomepageProfile.fromDict(record)
            self._profiles[profile.domain] = profile
        elif kind == "ref":
            missing = [name for name in _REF_FIELDS if name not in record]
            if missing:
                raise MalformedRecord(f"Record lacks {missing}")
            try:
                category = ResourceCategory(record["category"])
                scope = Scope(record["scope"])
            except ValueError as e:
                raise MalformedRecord(str(e)) from e
            self._profile(record["domain"]).add(category, scope, bool(record["broken"]),
                                                bool(record.get("host_external", False)))
        elif kind != "rejected":
            raise MalformedRecord(f"Unknown record kind {kind!r}")

    def addAll(self, records):
        for record in records:
            try:
                self.add(record)
            except MalformedRecord as e:
                self.nMalformed += 1
                logger.debug("Skipping record: %s", e)
        return self

    @property
    def profiles(self):
        """Profiles sorted by domain."""
        return [self._profiles[domain] for domain in sorted(self._profiles)]

    @property
    def pagesUnreachable(self):
        return len(self.unreachable - set(self._profiles))


def buildProfiles(records):
    """Build one profile per origin domain, sorted by domain.

    Parameters
    ----------
    records : iterable of `dict` or `ProbeResult`
        Results-file records; malformed ones are skipped and counted.

    Returns
    -------
    profiles : `list` of `HomepageProfile`
    """
    builder = ProfileBuilder().addAll(records)
    if builder.nMalformed:
        logger.warning("Skipped %d malformed records", builder.nMalformed)
    return builder.profiles


def buildProfilesFromFile(path):
    """Build profiles from a results or profiles file.

    Returns
    -------
    result : `lsst.pipe.base.Struct`
        ``profiles``, ``pagesUnreachable`` and ``nMalformed`` (undecodable
        lines included).
    """
    badLines = Counter()

    def onError(lineNumber, e):
        badLines["lines"] += 1
        logger.debug("%s:%d: %s", path, lineNumber, e)

    builder = ProfileBuilder().addAll(readRecords(path, onError))
    nMalformed = builder.nMalformed + badLines["lines"]
    if nMalformed:
        logger.warning("Skipped %d malformed records in %s", nMalformed, path)
    return pipeBase.Struct(profiles=builder.profiles, pagesUnreachable=builder.pagesUnreachable,
                           nMalformed=nMalformed)


def writeProfiles(path, profiles):
    """Write profiles as ``profile`` records, replacing ``path``."""
    with open(path, "w", encoding="utf-8") as f:
        for profile in profiles:
            f.write(json.dumps(profile.toDict(), sort_keys=True) + "\n")


def sampleForReview(results, n, seed):
    """Draw ``n`` broken results uniformly without replacement.

    Working results are filtered out first. The sample keeps the input
    order and depends only on ``seed`` and the broken results.

    Raises
    ------
    NotEnoughBroken
        If fewer than ``n`` broken results are available.
    """
    if n < 1:
        raise ValueError(f"Sample size must be positive, got {n}")
    broken = [r for r in results if r.broken]
    if n > len(broken):
        raise NotEnoughBroken(f"Asked for {n} broken results, only {len(broken)} available")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(broken), size=n, replace=False))
    return [broken[i] for i in chosen]
