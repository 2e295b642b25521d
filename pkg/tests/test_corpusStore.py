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

import unittest

import numpy as np

import lsst.utils.tests
from linkaudit.corpusStore import (EmptyFile, HomepageProfile, MissingColumn, NotEnoughBroken,
                                   ProfileBuilder, SiteEntry, appendRecords, appendResults,
                                   buildProfiles, buildProfilesFromFile, completedDomains, loadSiteList,
                                   pageRecord, readRecords, readResults, rejectedRecord, sampleForReview,
                                   toRecord, trimIncompleteSite, writeProfiles)
from linkaudit.htmlExtractor import ExtractionOrigin, ResourceCategory, ResourceRef
from linkaudit.prober import OutcomeKind, ProbeOutcome, ProbeResult
from linkaudit.triage import DnsState, TriageCause, TriageVerdict, TypoKind, TypoSignal
from linkaudit.urlModel import AbsoluteUrl, Scope

MAJESTIC = """GlobalRank,TldRank,Domain,TLD,RefSubNets
1,1,google.com,com,100
2,2,facebook.com,com,90
3,3,youtube.com,com,80
4,4,Google.com,com,70
5,5,,com,60
six,6,broken.com,com,50
7,7,twitter.com,com,40
"""


def writeText(path, text, encoding="utf-8"):
    with open(path, "w", encoding=encoding) as f:
        f.write(text)


def refRecord(domain, category, scope, broken, hostExternal=False):
    return {"record": "ref", "domain": domain, "category": category.value, "scope": scope.value,
            "broken": broken, "host_external": hostExternal}


def makeResult(page, url, status=200, kind=OutcomeKind.HTTP_RESPONSE, category=ResourceCategory.IMAGE):
    page = AbsoluteUrl.parse(page)
    url = AbsoluteUrl.parse(url)
    ref = ResourceRef.make(page, url, category, ExtractionOrigin.STATIC_HTML, str(url))
    outcome = ProbeOutcome(url=url, kind=kind, status=status if kind is OutcomeKind.HTTP_RESPONSE else None,
                           contentType="image/png", latencyMs=12.5)
    return ProbeResult.fromOutcome(ref, outcome)


class SiteListTestCase(lsst.utils.tests.TestCase):

    def testTopN(self):
        with lsst.utils.tests.getTempFilePath(".csv") as path:
            writeText(path, MAJESTIC)
            self.assertEqual(loadSiteList(path, 3),
                             [SiteEntry(1, "google.com"), SiteEntry(2, "facebook.com"),
                              SiteEntry(3, "youtube.com")])
            sites = loadSiteList(path, 100)
            self.assertEqual([s.domain for s in sites],
                             ["google.com", "facebook.com", "youtube.com", "twitter.com"])
            self.assertEqual(sites[-1].rank, 7)

    def testDomainOnly(self):
        with lsst.utils.tests.getTempFilePath(".csv") as path:
            writeText(path, "Domain\nexample.com\nexample.org\n", encoding="utf-8-sig")
            self.assertEqual(loadSiteList(path, 5),
                             [SiteEntry(1, "example.com"), SiteEntry(2, "example.org")])

    def testFirstColumnRank(self):
        with lsst.utils.tests.getTempFilePath(".csv") as path:
            writeText(path, "rank,domain\n2,b.com\n1,a.com\n")
            self.assertEqual(loadSiteList(path, 5), [SiteEntry(1, "a.com"), SiteEntry(2, "b.com")])

    def testErrors(self):
        with lsst.utils.tests.getTempFilePath(".csv") as path:
            writeText(path, "GlobalRank,Site\n1,google.com\n")
            with self.assertRaises(MissingColumn):
                loadSiteList(path, 1)
            writeText(path, "GlobalRank,TldRank,Domain\n")
            with self.assertRaises(EmptyFile):
                loadSiteList(path, 1)
            writeText(path, "")
            with self.assertRaises(EmptyFile):
                loadSiteList(path, 1)
            writeText(path, MAJESTIC)
            with self.assertRaises(ValueError):
                loadSiteList(path, 0)


class ResultsFileTestCase(lsst.utils.tests.TestCase):

    def testAppendOnly(self):
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            first = [pageRecord("a.test", AbsoluteUrl.parse("http://a.test/"), None, 0, ok=True),
                     refRecord("a.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True)]
            self.assertEqual(appendRecords(path, first), 2)
            with open(path, "rb") as f:
                before = f.read()
            self.assertEqual(appendRecords(path, []), 0)
            self.assertEqual(appendRecords(path, [refRecord("b.test", ResourceCategory.FONT, Scope.INTERNAL,
                                                            False)]), 1)
            with open(path, "rb") as f:
                after = f.read()
            self.assertTrue(after.startswith(before))
            records = list(readRecords(path))
            self.assertEqual(len(records), 3)
            self.assertEqual(records[:2], first)

    def testTruncatedLine(self):
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            appendRecords(path, [pageRecord("a.test", AbsoluteUrl.parse("http://a.test/"), None, 1, ok=True),
                                 refRecord("a.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True)])
            with open(path, "a") as f:
                f.write('{"record": "ref", "domain": "a.te')
            errors = []
            self.assertEqual(len(list(readRecords(path, lambda n, e: errors.append(n)))), 2)
            self.assertEqual(errors, [3])
            result = buildProfilesFromFile(path)
            self.assertEqual(result.nMalformed, 1)
            self.assertEqual(len(result.profiles), 1)
            self.assertEqual(result.profiles[0].externalBrokenCount, 1)

    def testAppendAfterTornLine(self):
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            appendRecords(path, [refRecord("a.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True)])
            with open(path, "a") as f:
                f.write('{"record": "ref", "domain": "a.te')
            appendRecords(path, [pageRecord("b.test", AbsoluteUrl.parse("http://b.test/"), None, 0,
                                            ok=True)])
            errors = []
            records = list(readRecords(path, lambda n, e: errors.append(n)))
            self.assertEqual(errors, [2])
            self.assertEqual([r["record"] for r in records], ["ref", "page"])
            self.assertEqual(completedDomains(path), {"b.test"})

    def testTrimIncompleteSite(self):
        page = pageRecord("a.test", AbsoluteUrl.parse("http://a.test/"), None, 2, ok=True)
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            self.assertEqual(trimIncompleteSite(path), 0)
            appendRecords(path, [refRecord("a.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True),
                                 refRecord("a.test", ResourceCategory.SCRIPT, Scope.EXTERNAL, False),
                                 page,
                                 refRecord("b.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True),
                                 refRecord("b.test", ResourceCategory.FONT, Scope.INTERNAL, False)])
            with open(path, "rb") as f:
                data = f.read()
            with open(path, "wb") as f:
                f.write(data[:-20])

            self.assertEqual(trimIncompleteSite(path), 2)
            self.assertEqual([r["domain"] for r in readRecords(path)], ["a.test", "a.test", "a.test"])
            self.assertEqual(trimIncompleteSite(path), 0)
            with open(path, "rb") as f:
                self.assertTrue(f.read().endswith(b"\n"))
            profiles = buildProfilesFromFile(path).profiles
            self.assertEqual([p.domain for p in profiles], ["a.test"])
            self.assertEqual(profiles[0].totalRefs, 2)

    def testCompletedDomains(self):
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            self.assertEqual(completedDomains(path), set())
            appendRecords(path, [pageRecord("a.test", None, None, 0, ok=False),
                                 refRecord("b.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True),
                                 pageRecord("c.test", AbsoluteUrl.parse("https://c.test/"), None, 0,
                                            ok=True)])
            self.assertEqual(completedDomains(path), {"a.test", "c.test"})

    def testResultRecords(self):
        ok = makeResult("https://site.test/", "https://cdn.other.test/a.png")
        gone = makeResult("https://site.test/", "https://cdn.other.test/lib/1.0/x.js", status=404,
                          category=ResourceCategory.SCRIPT)
        verdict = TriageVerdict(ref=gone.ref, cause=TriageCause.LIBRARY_GONE_CANDIDATE, signals=(),
                                dnsState=DnsState.RESOLVES)
        gone = ProbeResult(ref=gone.ref, outcome=gone.outcome, broken=True,
                           headerCategory=gone.headerCategory, categoryMismatch=gone.categoryMismatch,
                           verdict=verdict)
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            self.assertEqual(appendResults(path, [ok, gone], domain="site.test"), 2)
            self.assertEqual(readResults(path), [ok, gone])
        record = toRecord(gone)
        self.assertEqual(record["domain"], "site.test")
        self.assertEqual(record["triage_cause"], "LibraryGoneCandidate")
        self.assertEqual(record["header_category"], "Image")
        self.assertTrue(record["category_mismatch"])

    def testRejectedRecord(self):
        signal = TypoSignal(TypoKind.BAD_DOT, (10, 12))
        record = rejectedRecord("a.test", AbsoluteUrl.parse("https://a.test/"), "http://www..x.com/",
                                "UnparsableUrl", [signal])
        self.assertEqual(record["triage_cause"], "MalformedUrlTypo")
        self.assertEqual(record["typo_signals"], [{"kind": "BadDot", "span": [10, 12]}])


class ProfileTestCase(lsst.utils.tests.TestCase):

    def setUp(self):
        page = AbsoluteUrl.parse("https://a.test/")
        self.records = [
            pageRecord("a.test", page, None, 3, ok=True),
            refRecord("a.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True, hostExternal=True),
            refRecord("a.test", ResourceCategory.SCRIPT, Scope.EXTERNAL, False, hostExternal=True),
            refRecord("a.test", ResourceCategory.STYLESHEET, Scope.INTERNAL, True),
            rejectedRecord("a.test", page, "http://www..x.com/", "UnparsableUrl", []),
            pageRecord("b.test", None, None, 0, ok=False),
            pageRecord("c.test", AbsoluteUrl.parse("https://c.test/"), None, 0, ok=True),
        ]

    def testExample(self):
        builder = ProfileBuilder().addAll(self.records)
        profiles = builder.profiles
        self.assertEqual([p.domain for p in profiles], ["a.test", "c.test"])
        a, c = profiles
        self.assertEqual(a.totalRefs, 3)
        self.assertEqual(a.internalCount, 1)
        self.assertEqual(a.externalCount, 2)
        self.assertEqual(a.brokenCount, 2)
        self.assertEqual(a.externalBrokenCount, 1)
        self.assertEqual(a.hostExternalCount, 2)
        self.assertEqual(a.perCategory[ResourceCategory.IMAGE], 1)
        self.assertEqual(a.externalPerCategory[ResourceCategory.STYLESHEET], 0)
        self.assertEqual(a.brokenPerCategory[ResourceCategory.STYLESHEET], 1)
        self.assertEqual(a.externalBrokenPerCategory[ResourceCategory.IMAGE], 1)
        self.assertTrue(a.hasBroken)
        self.assertEqual(c, HomepageProfile(domain="c.test"))
        self.assertFalse(c.hasBroken)
        self.assertEqual(builder.pagesUnreachable, 1)
        self.assertEqual(builder.nMalformed, 0)

    def testEmpty(self):
        self.assertEqual(buildProfiles([]), [])

    def testMalformed(self):
        records = self.records + [{"record": "ref", "domain": "a.test", "category": "Image"},
                                  refRecord("a.test", ResourceCategory.IMAGE, Scope.EXTERNAL, True)
                                  | {"category": "Sprite"},
                                  {"record": "mystery", "domain": "a.test"}]
        builder = ProfileBuilder().addAll(records)
        self.assertEqual(builder.nMalformed, 3)
        self.assertEqual(builder.profiles, ProfileBuilder().addAll(self.records).profiles)

    def testProbeResults(self):
        results = [makeResult("https://site.test/", "https://cdn.other.test/a.png"),
                   makeResult("https://site.test/", "https://site.test/b.png", status=500)]
        profile, = buildProfiles(results)
        self.assertEqual(profile.domain, "site.test")
        self.assertEqual((profile.externalCount, profile.internalCount, profile.brokenCount), (1, 1, 1))

    def testOrderInvariance(self):
        expected = buildProfiles(self.records)
        rng = np.random.default_rng(5)
        for _ in range(5):
            order = rng.permutation(len(self.records))
            self.assertEqual(buildProfiles([self.records[i] for i in order]), expected)

    def testFuzzedInvariants(self):
        rng = np.random.default_rng(17)
        categories = list(ResourceCategory)
        records = []
        for _ in range(2000):
            records.append(refRecord(f"site{rng.integers(20)}.test",
                                     categories[rng.integers(len(categories))],
                                     Scope.EXTERNAL if rng.random() < 0.6 else Scope.INTERNAL,
                                     bool(rng.random() < 0.2), bool(rng.random() < 0.7)))
        profiles = buildProfiles(records)
        for profile in profiles:
            profile.checkInvariants()
        self.assertEqual(sum(p.totalRefs for p in profiles), len(records))
        self.assertEqual(sum(p.brokenCount for p in profiles), sum(r["broken"] for r in records))

    def testProfileFile(self):
        profiles = buildProfiles(self.records)
        with lsst.utils.tests.getTempFilePath(".jsonl") as path:
            writeProfiles(path, profiles)
            result = buildProfilesFromFile(path)
        self.assertEqual(result.profiles, profiles)
        self.assertEqual(result.nMalformed, 0)


class SampleTestCase(lsst.utils.tests.TestCase):

    def setUp(self):
        self.results = []
        for i in range(300):
            status = 404 if i % 5 < 2 else 200
            self.results.append(makeResult("https://site.test/", f"https://cdn.other.test/{i}.png", status))

    def testReproducible(self):
        first = sampleForReview(self.results, 100, seed=0)
        second = sampleForReview(self.results, 100, seed=0)
        self.assertEqual(first, second)
        self.assertEqual(len(first), 100)
        self.assertTrue(all(r.broken for r in first))
        self.assertEqual(len({str(r.ref.url) for r in first}), 100)
        positions = [self.results.index(r) for r in first]
        self.assertEqual(positions, sorted(positions))
        self.assertNotEqual(sampleForReview(self.results, 100, seed=1), first)

    def testWorkingResultsIgnored(self):
        broken = [r for r in self.results if r.broken]
        self.assertEqual(sampleForReview(broken, 50, seed=3), sampleForReview(self.results, 50, seed=3))

    def testLimits(self):
        self.assertEqual(len(sampleForReview(self.results, 120, seed=0)), 120)
        with self.assertRaises(NotEnoughBroken):
            sampleForReview(self.results, 121, seed=0)
        with self.assertRaises(ValueError):
            sampleForReview(self.results, 0, seed=0)


class TestMemory(lsst.utils.tests.MemoryTestCase):
    pass


def setup_module(module):
    lsst.utils.tests.init()


if __name__ == "__main__":
    lsst.utils.tests.init()
    unittest.main()
