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

"""Summary statistics, rendered reports and histogram data.
"""

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

import lsst.pipe.base as pipeBase
from lsst.utils.logging import getLogger

from .gammaModel import GammaModel, gammaCdf
from .htmlExtractor import ResourceCategory
from .urlModel import Scope, registrableDomain

__all__ = ("UnknownFormat", "FORMATS", "CategoryShare", "SummaryStats", "HistogramBin", "Histogram",
           "summarize", "render", "histogram", "histogramToCsv", "projectAffected",
           "summarizeTriage", "renderTriage")

logger = getLogger("linkaudit.report")

# Accepted format names, mapped to the canonical one.
FORMATS = {
    "markdown": "markdown",
    "markdown-table": "markdown",
    "csv": "csv",
    "comma-separated": "csv",
    "json": "json",
}


class UnknownFormat(ValueError):
    """Raised for a report format that is not one of `FORMATS`."""


def _canonicalFormat(format):
    try:
        return FORMATS[format]
    except KeyError:
        raise UnknownFormat(f"Unknown format {format!r}; expected one of {sorted(FORMATS)}") from None


def _pct(part, whole):
    return 100.0*part/whole if whole else 0.0


@dataclass(frozen=True)
class CategoryShare:
    category: ResourceCategory
    count: int
    percentage: float


@dataclass
class SummaryStats:
    """Corpus-wide figures computed from homepage profiles.

    Category breakdowns count external references only and are sorted by
    decreasing count. Percentages keep full precision; rounding happens when
    rendering.
    """
    pagesScanned: int = 0
    pagesWithBroken: int = 0
    pctPagesWithBroken: float = 0.0
    totalExternalRefs: int = 0
    brokenExternalRefs: int = 0
    pctBroken: float = 0.0
    categoryBreakdown: List[CategoryShare] = field(default_factory=list)
    brokenCategoryBreakdown: List[CategoryShare] = field(default_factory=list)
    meanDepsPerPage: float = 0.0
    pctInternal: float = 0.0
    pctExternal: float = 0.0
    empty: bool = True
    pagesUnreachable: int = 0
    totalRefs: int = 0
    internalRefs: int = 0
    brokenRefs: int = 0
    hostExternalRefs: int = 0
    pctExternalByHost: float = 0.0

    def categoryGroupShare(self, categories, broken=True):
        """Percentage of (broken) external references falling in ``categories``."""
        breakdown = self.brokenCategoryBreakdown if broken else self.categoryBreakdown
        wanted = set(categories)
        return sum(share.percentage for share in breakdown if share.category in wanted)

    def toDict(self):
        data = asdict(self)
        for name in ("categoryBreakdown", "brokenCategoryBreakdown"):
            data[name] = [{"category": s.category.value, "count": s.count, "percentage": s.percentage}
                          for s in getattr(self, name)]
        return data

    @classmethod
    def fromDict(cls, data):
        data = dict(data)
        for name in ("categoryBreakdown", "brokenCategoryBreakdown"):
            data[name] = [CategoryShare(ResourceCategory(s["category"]), int(s["count"]),
                                        float(s["percentage"])) for s in data.get(name, [])]
        return cls(**data)


def _breakdown(counts):
    total = sum(counts.values())
    shares = [CategoryShare(category, n, _pct(n, total)) for category, n in counts.items() if n > 0]
    return sorted(shares, key=lambda s: (-s.count, s.category.value))


def summarize(profiles, pagesUnreachable=0):
    """Compute `SummaryStats` over homepage profiles.

    Parameters
    ----------
    profiles : `list` of `linkaudit.corpusStore.HomepageProfile`
        One per successfully fetched homepage.
    pagesUnreachable : `int`
        Homepages that could not be fetched; reported, never used as a
        denominator.
    """
    profiles = list(profiles)
    stats = SummaryStats(pagesUnreachable=pagesUnreachable)
    if not profiles:
        return stats

    external = Counter()
    brokenExternal = Counter()
    for profile in profiles:
        external.update(profile.externalPerCategory)
        brokenExternal.update(profile.externalBrokenPerCategory)
        stats.totalRefs += profile.totalRefs
        stats.internalRefs += profile.internalCount
        stats.totalExternalRefs += profile.externalCount
        stats.brokenExternalRefs += profile.externalBrokenCount
        stats.brokenRefs += profile.brokenCount
        stats.hostExternalRefs += profile.hostExternalCount
        stats.pagesWithBroken += profile.hasBroken

    stats.empty = False
    stats.pagesScanned = len(profiles)
    stats.pctPagesWithBroken = _pct(stats.pagesWithBroken, stats.pagesScanned)
    stats.pctBroken = _pct(stats.brokenExternalRefs, stats.totalExternalRefs)
    stats.categoryBreakdown = _breakdown(external)
    stats.brokenCategoryBreakdown = _breakdown(brokenExternal)
    stats.meanDepsPerPage = stats.totalRefs/stats.pagesScanned
    stats.pctInternal = _pct(stats.internalRefs, stats.totalRefs)
    stats.pctExternal = _pct(stats.totalExternalRefs, stats.totalRefs)
    stats.pctExternalByHost = _pct(stats.hostExternalRefs, stats.totalRefs)
    return stats


def projectAffected(stats, population):
    """Number of sites in ``population`` expected to have a broken reference."""
    if population < 0:
        raise ValueError(f"Population must be non-negative, got {population}")
    return population*stats.pctPagesWithBroken/100.0


def _grouped(n):
    return f"{n:,}".replace(",", " ")


def _markdownTable(title, shares):
    lines = [f"## {title}", "", "| Type | Number | Percentage |", "|---|---:|---:|"]
    for share in shares:
        lines.append(f"| {share.category.value} | {_grouped(share.count)} | {share.percentage:.1f}% |")
    return lines


def _renderMarkdown(stats):
    lines = ["# Broken external resources", ""]
    if stats.empty:
        lines += ["No homepage was scanned.", ""]
    lines += [
        "| Metric | Value |",
        "|---|---:|",
        f"| Pages scanned | {_grouped(stats.pagesScanned)} |",
        f"| Pages unreachable | {_grouped(stats.pagesUnreachable)} |",
        f"| Pages with a broken link | {_grouped(stats.pagesWithBroken)} ({stats.pctPagesWithBroken:.1f}%) |",
        f"| External references | {_grouped(stats.totalExternalRefs)} |",
        f"| Broken external references | {_grouped(stats.brokenExternalRefs)} ({stats.pctBroken:.1f}%) |",
        f"| Mean references per page | {stats.meanDepsPerPage:.1f} |",
        f"| Internal / external | {stats.pctInternal:.1f}% / {stats.pctExternal:.1f}% |",
        f"| External by host | {stats.pctExternalByHost:.1f}% |",
        "",
    ]
    lines += _markdownTable("External resources by type", stats.categoryBreakdown)
    lines.append("")
    lines += _markdownTable("Broken external resources by type", stats.brokenCategoryBreakdown)
    return "\n".join(lines) + "\n"


def _renderCsv(stats):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["table", "category", "count", "percentage"])
    for table, shares in (("external", stats.categoryBreakdown),
                          ("broken_external", stats.brokenCategoryBreakdown)):
        for share in shares:
            writer.writerow([table, share.category.value, share.count, f"{share.percentage:.1f}"])
    return buffer.getvalue()


def render(stats, format):
    """Render ``stats`` as text.

    Parameters
    ----------
    stats : `SummaryStats`
    format : `str`
        ``markdown`` (or ``markdown-table``), ``csv`` (or
        ``comma-separated``) or ``json``.

    Raises
    ------
    UnknownFormat
        For any other format name.
    """
    format = _canonicalFormat(format)
    if format == "markdown":
        return _renderMarkdown(stats)
    if format == "csv":
        return _renderCsv(stats)
    return json.dumps(stats.toDict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class HistogramBin:
    lower: float
    count: int
    expected: Optional[float] = None


@dataclass
class Histogram:
    binWidth: float
    bins: List[HistogramBin]
    overlay: Optional[GammaModel] = None
    series: str = "external"

    @property
    def total(self):
        return sum(b.count for b in self.bins)


def histogram(profiles, series="external", binWidth=1.0, overlay=None):
    """Bin the per-homepage counts of ``series``.

    Bins are ``[i*binWidth, (i+1)*binWidth)`` from zero up to the largest
    count. With an ``overlay`` model the range is extended to at least
    ``60*scale`` and every bin carries the expected count
    ``n*(cdf(upper) - cdf(lower))``.
    """
    if not binWidth > 0:
        raise ValueError(f"Bin width must be positive, got {binWidth}")
    if series not in ("external", "total"):
        raise ValueError(f"Unknown series {series!r}")
    values = np.array([p.externalCount if series == "external" else p.totalRefs for p in profiles],
                      dtype=float)
    if values.size == 0:
        return Histogram(binWidth=binWidth, bins=[], overlay=overlay, series=series)

    nBins = int(math.floor(values.max()/binWidth)) + 1
    if overlay is not None:
        nBins = max(nBins, int(math.ceil(60*overlay.scale/binWidth)))
    counts = np.bincount(np.floor(values/binWidth).astype(int), minlength=nBins)
    edges = np.arange(nBins + 1)*binWidth
    expected = [None]*nBins
    if overlay is not None:
        cdf = gammaCdf(edges, overlay.shape, overlay.scale)
        expected = list(values.size*np.diff(cdf))
    bins = [HistogramBin(float(edges[i]), int(counts[i]), expected[i]) for i in range(nBins)]
    return Histogram(binWidth=binWidth, bins=bins, overlay=overlay, series=series)


def _number(x):
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def histogramToCsv(hist):
    """Render a `Histogram` as ``bin_lower,count,expected_count`` rows."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["bin_lower", "count", "expected_count"])
    for b in hist.bins:
        writer.writerow([_number(b.lower), b.count, "" if b.expected is None else f"{b.expected:.6f}"])
    return buffer.getvalue()


def summarizeTriage(results, rules=None):
    """Tally triage causes and list the external domains behind broken references.

    Parameters
    ----------
    results : iterable of `linkaudit.prober.ProbeResult`
        Triaged results; working ones are ignored.

    Returns
    -------
    summary : `lsst.pipe.base.Struct`
        ``causes``
            `collections.Counter` of cause names.
        ``watchList``
            List of ``(domain, dnsState, brokenCount)`` for external
            registrable domains, most broken references first.
    """
    causes = Counter()
    watch = Counter()
    states = {}
    for result in results:
        if not result.broken:
            continue
        verdict = result.verdict
        causes[verdict.cause.value if verdict else "Untriaged"] += 1
        if result.ref.scope is Scope.EXTERNAL:
            domain = registrableDomain(result.ref.url.host, rules)
            watch[domain] += 1
            if verdict is not None:
                states.setdefault(domain, verdict.dnsState.value)
    watchList = [(domain, states.get(domain, "Unknown"), n)
                 for domain, n in sorted(watch.items(), key=lambda item: (-item[1], item[0]))]
    return pipeBase.Struct(causes=causes, watchList=watchList)


def renderTriage(summary, format="markdown"):
    format = _canonicalFormat(format)
    if format == "json":
        return json.dumps({"causes": dict(sorted(summary.causes.items())),
                           "watch_list": [{"domain": d, "dns_state": s, "broken": n}
                                          for d, s, n in summary.watchList]},
                          indent=2, sort_keys=True) + "\n"
    if format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["domain", "dns_state", "broken"])
        writer.writerows(summary.watchList)
        return buffer.getvalue()
    total = sum(summary.causes.values())
    lines = ["## Broken references by cause", "", "| Cause | Number | Percentage |", "|---|---:|---:|"]
    for cause, n in sorted(summary.causes.items(), key=lambda item: (-item[1], item[0])):
        lines.append(f"| {cause} | {_grouped(n)} | {_pct(n, total):.1f}% |")
    lines += ["", "## Watch list", "", "| Domain | DNS state | Broken |", "|---|---|---:|"]
    for domain, state, n in summary.watchList:
        lines.append(f"| {domain} | {state} | {_grouped(n)} |")
    return "\n".join(lines) + "\n"
