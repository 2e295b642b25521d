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

"""Command-line interface: ``link-audit <command> [options]``.

Exit codes are 0 on success, 1 on runtime or I/O failure and 2 on usage or
configuration errors.
"""

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from datetime import datetime, timezone

import lsst.pex.config as pexConfig
from lsst.utils.logging import getLogger

from .corpusStore import buildProfilesFromFile, loadSiteList, readResults, sampleForReview, toRecord
from .dnsLookup import DnsPythonLookup, StubLookup
from .gammaModel import GammaFitConfig, detectAnomalies, fitGamma, readModel, selectSeries, writeModel
from .prober import ScanConfig
from .report import (FORMATS, histogram, histogramToCsv, projectAffected, render, renderTriage,
                     summarize, summarizeTriage)
from .scanTask import RunManifest, ScanTask, groupFetchLog, manifestPath
from .triage import TriageTask
from .urlModel import SuffixRules, defaultSuffixRules
from .version import __version__

__all__ = ("main", "makeParser", "UsageError", "cmdScan", "cmdFit", "cmdDetect", "cmdReport",
           "cmdSample", "cmdTriage")

logger = getLogger("linkaudit.cli")


class UsageError(ValueError):
    """Raised for inconsistent command-line arguments."""


def _emit(text, path=None):
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    else:
        sys.stdout.write(text)


def _rules(args):
    return SuffixRules(args.suffixOverrides) if args.suffixOverrides else defaultSuffixRules()


def _lookup(args, timeout):
    """Return ``(lookup, pinned)`` for the resolver selected on the command line."""
    if args.resolverFile:
        return StubLookup.fromFile(args.resolverFile), True
    return DnsPythonLookup(timeout=timeout), False


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            flag = "--" + "".join("-" + c.lower() if c.isupper() else c for c in name)
            raise UsageError(f"{args.command} requires {flag}")


def makeScanConfig(args):
    config = ScanConfig()
    if args.configFile:
        config.load(args.configFile)
    for name, value in (("concurrency", args.concurrency), ("perHostLimit", args.perHost),
                        ("timeout", args.timeout), ("userAgent", args.userAgent)):
        if value is not None:
            setattr(config, name, value)
    config.validate()
    return config


def cmdScan(args):
    """Scan the homepages of the top ``--top`` sites of ``--input``."""
    _require(args, "input", "out", "top")
    if args.top < 1:
        raise UsageError(f"--top must be positive, got {args.top}")
    config = makeScanConfig(args)
    sites = loadSiteList(args.input, args.top)
    rules = _rules(args)
    lookup, pinned = _lookup(args, config.timeout)
    fetchLog = None
    if args.fetchLog:
        with open(args.fetchLog, encoding="utf-8") as f:
            grouped = groupFetchLog(f)
        if grouped.nMalformed:
            logger.warning("Skipped %d malformed fetch-log lines", grouped.nMalformed)
        fetchLog = grouped.records

    manifest = RunManifest(config=config.toDict(), siteListPath=args.input, topN=args.top,
                           outputPath=args.out, startedAt=datetime.now(timezone.utc))
    task = ScanTask(config=config, lookup=lookup, pinned=pinned, rules=rules, fetchLog=fetchLog)
    try:
        result = task.run(sites, args.out, resume=args.resume)
    finally:
        task.close()
    open(args.out, "a").close()
    manifest.finish().write()
    print(f"Scanned {result.attempted} sites ({result.skipped} skipped): {result.succeeded} fetched, "
          f"{result.failed} unavailable; manifest in {manifestPath(args.out)}")
    return 0


def _fitConfig(args):
    config = GammaFitConfig()
    if args.series is not None:
        config.series = args.series
    if args.truncateBelow is not None:
        config.truncationFloor = args.truncateBelow
    if args.alpha is not None:
        config.alpha = args.alpha
    config.validate()
    return config


def cmdFit(args):
    """Fit a gamma model to the per-homepage counts of a results or profiles file."""
    _require(args, "input", "out")
    config = _fitConfig(args)
    profiles = buildProfilesFromFile(args.input).profiles
    values = selectSeries(profiles, config.series, config.truncationFloor)
    model = fitGamma(values, series=config.series, truncationFloor=config.truncationFloor)
    model = dataclasses.replace(model, alphaDefault=config.alpha)
    writeModel(model, args.out)
    print(f"series={model.series} n={model.n} shape={model.shape:.6g} scale={model.scale:.6g} "
          f"ks={model.ksStatistic:.4g} (moments: shape={model.momShape:.6g} scale={model.momScale:.6g})")
    return 0


def cmdDetect(args):
    """Print the homepages whose count is anomalous under a fitted model."""
    _require(args, "input", "model")
    model = readModel(args.model)
    alpha = args.alpha if args.alpha is not None else model.alphaDefault
    profiles = buildProfilesFromFile(args.input).profiles
    verdicts = detectAnomalies(profiles, model, alpha, series=args.series or model.series)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["domain", "observed", "tail_prob", "side", "flagged"])
    for verdict in verdicts:
        if verdict.flagged or args.all:
            writer.writerow([verdict.domain, verdict.observed, f"{verdict.tailProb:.6e}",
                             verdict.side.value, int(verdict.flagged)])
    _emit(buffer.getvalue(), args.out)
    logger.info("%d of %d homepages flagged at alpha=%g", sum(v.flagged for v in verdicts),
                len(verdicts), alpha)
    return 0


def cmdReport(args):
    """Render summary statistics, optionally exporting histogram data."""
    _require(args, "input")
    build = buildProfilesFromFile(args.input)
    stats = summarize(build.profiles, build.pagesUnreachable)
    text = render(stats, args.format)
    if args.population is not None:
        projected = projectAffected(stats, args.population)
        if FORMATS[args.format] == "json":
            data = json.loads(text)
            data["projected_affected"] = {"population": args.population, "sites": projected}
            text = json.dumps(data, indent=2, sort_keys=True) + "\n"
        elif FORMATS[args.format] == "markdown":
            text += (f"\nProjected sites with a broken link: {projected:,.0f} of "
                     f"{args.population:,}\n")
    _emit(text, args.out)
    if args.histogram:
        overlay = readModel(args.model) if args.model else None
        hist = histogram(build.profiles, args.series or "external", args.binWidth, overlay)
        _emit(histogramToCsv(hist), args.histogram)
    return 0


def cmdSample(args):
    """Print a seeded random sample of broken references for manual review."""
    _require(args, "input")
    sample = sampleForReview(readResults(args.input), args.n, args.seed)
    text = "".join(json.dumps(toRecord(result), sort_keys=True) + "\n" for result in sample)
    _emit(text, args.out)
    return 0


def cmdTriage(args):
    """Print the triage cause distribution and the watch list of external domains."""
    _require(args, "input")
    results = readResults(args.input)
    rules = _rules(args)
    if args.recheck:
        lookup, _ = _lookup(args, args.timeout or ScanConfig.timeout.default)
        cleared = [dataclasses.replace(r, verdict=None) for r in results]
        results = TriageTask(lookup=lookup, rules=rules).run(cleared)
    _emit(renderTriage(summarizeTriage(results, rules), args.format), args.out)
    return 0


def _commonOptions():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="Site list (scan) or results/profiles file")
    common.add_argument("--out", help="Output file; stdout when omitted (except scan and fit)")
    common.add_argument("--top", type=int, help="Number of top sites to scan")
    common.add_argument("--concurrency", type=int,
                        help=f"Requests in flight (default {ScanConfig.concurrency.default})")
    common.add_argument("--per-host", dest="perHost", type=int,
                        help=f"Requests in flight per host (default {ScanConfig.perHostLimit.default})")
    common.add_argument("--timeout", type=float,
                        help=f"Request timeout in seconds (default {ScanConfig.timeout.default:g})")
    common.add_argument("--user-agent", dest="userAgent", help="User-Agent header")
    common.add_argument("--resume", action="store_true", help="Skip sites already in --out")
    common.add_argument("--seed", type=int, default=0, help="Random seed for sampling")
    common.add_argument("--alpha", type=float, help="Anomaly threshold (default 0.001)")
    common.add_argument("--series", choices=("external", "total"), help="Count to model")
    common.add_argument("--format", choices=sorted(FORMATS), default="markdown", help="Report format")
    common.add_argument("--bin-width", dest="binWidth", type=float, default=10.0,
                        help="Histogram bin width")
    common.add_argument("--truncate-below", dest="truncateBelow", type=float,
                        help="Discard counts below this value before fitting")
    common.add_argument("--model", help="Gamma model file")
    common.add_argument("--n", type=int, default=100, help="Review sample size")
    common.add_argument("--population", type=int, help="Site population to project prevalence onto")
    common.add_argument("--histogram", help="Write histogram CSV to this file")
    common.add_argument("--all", action="store_true", help="detect: list every homepage")
    common.add_argument("--recheck", action="store_true", help="triage: resolve DNS states again")
    common.add_argument("--resolver-file", dest="resolverFile",
                        help="Stub resolver file; also pins scan connections to its addresses")
    common.add_argument("--fetch-log", dest="fetchLog", help="JSON lines of runtime xhr/fetch requests")
    common.add_argument("--suffix-overrides", dest="suffixOverrides", help="Extra public suffix rules")
    common.add_argument("--config-file", dest="configFile", help="ScanConfig override file")
    common.add_argument("--log-level", dest="logLevel", default="INFO",
                        choices=("TRACE", "DEBUG", "VERBOSE", "INFO", "WARNING", "ERROR"))
    return common


def makeParser():
    common = _commonOptions()
    parser = argparse.ArgumentParser(
        prog="link-audit",
        description=("Survey broken external resources on homepages. Default politeness: "
                     f"concurrency {ScanConfig.concurrency.default}, "
                     f"{ScanConfig.perHostLimit.default} per host, "
                     f"timeout {ScanConfig.timeout.default:g} s, "
                     f"{ScanConfig.retries.default} network retry."))
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in (("scan", cmdScan), ("fit", cmdFit), ("detect", cmdDetect),
                       ("report", cmdReport), ("sample", cmdSample), ("triage", cmdTriage)):
        sub = subparsers.add_parser(name, parents=[common], help=func.__doc__)
        sub.set_defaults(func=func)
    return parser


def _configureLogging(level):
    numeric = {"TRACE": 5, "VERBOSE": 15}.get(level) or getattr(logging, level)
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("linkaudit").setLevel(numeric)


def main(argv=None):
    """Run one command; returns the process exit code."""
    parser = makeParser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code
    _configureLogging(args.logLevel)
    try:
        return args.func(args)
    except (UsageError, pexConfig.FieldValidationError) as e:
        logger.error("%s", e)
        return 2
    except (OSError, ValueError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 1
