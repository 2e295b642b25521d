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

"""Homepage scan pipeline: fetch, extract, probe, triage and persist.
"""

import json
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional

import lsst.pipe.base as pipeBase
from lsst.utils.timer import timeMethod

from .corpusStore import (appendRecords, completedDomains, pageRecord, readRecords, rejectedRecord,
                          toRecord, trimIncompleteSite)
from .htmlExtractor import MalformedRecord, extractPage, ingestFetchLog
from .prober import OutcomeKind, ProbeTask, ScanConfig
from .triage import TriageConfig, TriageTask, detectTypos
from .urlModel import normalizeUrl
from .version import __version__

__all__ = ("ScanTask", "RunManifest", "manifestPath", "groupFetchLog")


def manifestPath(outputPath):
    return outputPath + ".manifest.json"


@dataclass
class RunManifest:
    """Parameters and page counts of one scan run.

    The page counts are taken from the results file when the run finishes,
    so they cover earlier runs that were resumed.
    """
    config: dict
    siteListPath: Optional[str]
    topN: int
    outputPath: str
    startedAt: datetime
    finishedAt: Optional[datetime] = None
    version: str = __version__
    attempted: int = 0
    succeeded: int = 0
    failed: int = 0

    def finish(self):
        self.finishedAt = datetime.now(timezone.utc)
        self.attempted = self.succeeded = self.failed = 0
        for record in readRecords(self.outputPath):
            if record.get("record") != "page":
                continue
            self.attempted += 1
            if record.get("ok"):
                self.succeeded += 1
            else:
                self.failed += 1
        return self

    def toDict(self):
        return {
            "config": self.config,
            "site_list_path": self.siteListPath,
            "top_n": self.topN,
            "output_path": self.outputPath,
            "started_at": self.startedAt.isoformat(),
            "finished_at": self.finishedAt.isoformat() if self.finishedAt else None,
            "version": self.version,
            "pages_attempted": self.attempted,
            "pages_succeeded": self.succeeded,
            "pages_failed": self.failed,
        }

    def write(self, path=None):
        with open(path or manifestPath(self.outputPath), "w", encoding="utf-8") as f:
            json.dump(self.toDict(), f, indent=2, sort_keys=True)
            f.write("\n")


def groupFetchLog(lines):
    """Group fetch-log records by the host of their page.

    Returns
    -------
    result : `lsst.pipe.base.Struct`
        ``records`` (`dict` of host to list of `dict`) and ``nMalformed``.
    """
    records = defaultdict(list)
    nMalformed = 0
    for line in lines:
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
            if not isinstance(record, dict) or not isinstance(record.get("page"), str) or not record["page"]:
                raise MalformedRecord("record without page")
            host = normalizeUrl(record["page"], None).host
        except ValueError:
            nMalformed += 1
            continue
        records[host].append(record)
    return pipeBase.Struct(records=dict(records), nMalformed=nMalformed)


class ScanTask(pipeBase.Task):
    """Scan the homepages of a site list and append the results to a file.

    Sites are handled in batches of ``config.batchSize``: homepages are
    fetched in parallel, every reference of the batch is probed through one
    `ProbeTask`, broken ones are triaged, and the batch is written in rank
    order. Every attempted site ends with its ``page`` record, which is
    what a resumed scan uses to skip it; records after the last one are
    dropped before resuming.

    Parameters
    ----------
    lookup : `linkaudit.dnsLookup.DnsLookup`, optional
        Resolver used for triage.
    pinned : `bool`
        Also route the prober's connections through ``lookup``.
    rules : `linkaudit.urlModel.SuffixRules`, optional
    fetchLog : `dict`, optional
        Fetch-log records per page host, see `groupFetchLog`.
    **kwargs
        Passed to `lsst.pipe.base.Task`.
    """
    ConfigClass = ScanConfig
    _DefaultName = "scan"

    def __init__(self, lookup=None, pinned=False, rules=None, fetchLog=None, **kwargs):
        pipeBase.Task.__init__(self, **kwargs)
        self.rules = rules
        self.fetchLog = fetchLog or {}
        self.probe = ProbeTask(lookup=lookup if pinned else None, config=self.config,
                               name="probe", parentTask=self)
        self.triage = TriageTask(lookup=lookup, rules=rules, config=TriageConfig(),
                                 name="triage", parentTask=self)

    def close(self):
        self.probe.close()

    def fetchHomepage(self, domain):
        """Fetch the homepage of a bare domain.

        Each scheme of ``config.homepageSchemes`` is tried in turn; the next
        one is only tried after a network failure.

        Returns
        -------
        result : `lsst.pipe.base.Struct`
            ``ok`` (`bool`, final status 200), ``outcome``, ``finalUrl`` and
            ``body``. ``outcome`` is `None` if the domain is not a valid host.
        """
        page = None
        for scheme in self.config.homepageSchemes:
            try:
                url = normalizeUrl(f"{scheme}://{domain}/", None)
            except ValueError as e:
                self.log.warning("%s: not a valid host (%s)", domain, e)
                return pipeBase.Struct(ok=False, outcome=None, finalUrl=None, body=None)
            page = self.probe.fetchPage(url)
            if page.outcome.kind is OutcomeKind.HTTP_RESPONSE:
                break
            self.log.debug("%s: %s over %s", domain, page.outcome.kind.value, scheme)
        ok = page.outcome.kind is OutcomeKind.HTTP_RESPONSE and page.outcome.status == 200
        return pipeBase.Struct(ok=ok, outcome=page.outcome, finalUrl=page.finalUrl, body=page.body)

    def extract(self, domain, page):
        """Extract the references of a fetched homepage.

        Returns
        -------
        result : `lsst.pipe.base.Struct`
            ``refs`` (static and fetch-log references) and ``rejected``.
        """
        extracted = extractPage(page.body or "", page.finalUrl, self.rules)
        refs = list(extracted.refs)
        logRecords = self.fetchLog.get(page.finalUrl.host) or self.fetchLog.get(domain)
        if logRecords:
            dynamic = ingestFetchLog(logRecords, page.finalUrl, self.rules)
            seen = {ref.key for ref in refs}
            refs += [ref for ref in dynamic.refs if ref.key not in seen]
            if dynamic.nMalformed:
                self.log.debug("%s: %d malformed fetch-log records", domain, dynamic.nMalformed)
        return pipeBase.Struct(refs=refs, rejected=extracted.rejected)

    def _scanBatch(self, batch):
        pages = self.probe.map(self.fetchHomepage, [site.domain for site in batch])
        extracted = []
        for site, page in zip(batch, pages):
            if not page.ok:
                kind = page.outcome.kind.value if page.outcome else "InvalidHost"
                status = page.outcome.status if page.outcome else None
                self.log.warning("%s: homepage unavailable (%s %s)", site.domain, kind, status or "")
                extracted.append(None)
                continue
            try:
                extracted.append(self.extract(site.domain, page))
            except Exception as e:
                self.log.warning("%s: unable to extract references: %s", site.domain, e)
                extracted.append(None)

        refs = [ref for item in extracted if item is not None for ref in item.refs]
        results = self.triage.run(self.probe.probeAll(refs), mapper=self.probe.map)

        records = []
        start = 0
        for site, page, item in zip(batch, pages, extracted):
            if item is None:
                records.append(pageRecord(site.domain, page.finalUrl, page.outcome, 0, ok=False))
                continue
            siteResults = results[start:start + len(item.refs)]
            start += len(item.refs)
            for raw, reason in item.rejected:
                records.append(rejectedRecord(site.domain, page.finalUrl, raw, reason,
                                              detectTypos(raw, self.rules)))
            records.extend(toRecord(result, site.domain) for result in siteResults)
            records.append(pageRecord(site.domain, page.finalUrl, page.outcome, len(siteResults)))
        return pipeBase.Struct(records=records, nRefs=len(refs),
                               nBroken=sum(r.broken for r in results),
                               nOk=sum(item is not None for item in extracted))

    @timeMethod
    def run(self, sites, outputPath, resume=False):
        """Scan ``sites`` and append their records to ``outputPath``.

        Parameters
        ----------
        sites : `list` of `linkaudit.corpusStore.SiteEntry`
        outputPath : `str`
        resume : `bool`
            Skip sites that already have a page record in ``outputPath``.

        Returns
        -------
        result : `lsst.pipe.base.Struct`
            ``attempted``, ``succeeded``, ``failed`` and ``skipped`` site
            counts for this run, and ``nRecords`` written.
        """
        done = set()
        if resume:
            trimIncompleteSite(outputPath)
            done = completedDomains(outputPath)
        todo = [site for site in sites if site.domain not in done]
        skipped = len(sites) - len(todo)
        self.log.info("Scanning %d sites (%d already complete)", len(todo), skipped)

        succeeded = 0
        nRecords = 0
        batchSize = self.config.batchSize
        for i in range(0, len(todo), batchSize):
            batch = todo[i:i + batchSize]
            result = self._scanBatch(batch)
            nRecords += appendRecords(outputPath, result.records)
            succeeded += result.nOk
            self.log.verbose("Sites %d-%d: %d refs, %d broken", i + 1, i + len(batch),
                             result.nRefs, result.nBroken)
        self.log.info("Scanned %d sites: %d fetched, %d unavailable", len(todo), succeeded,
                      len(todo) - succeeded)
        return pipeBase.Struct(attempted=len(todo), succeeded=succeeded, failed=len(todo) - succeeded,
                               skipped=skipped, nRecords=nRecords)
