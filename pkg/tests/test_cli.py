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

import json
import os
import shutil
import tempfile
import unittest

import numpy as np

import lsst.utils.tests
from linkaudit.cli import main
from linkaudit.corpusStore import HomepageProfile, appendResults, writeProfiles
from linkaudit.gammaModel import GammaModel, readModel
from linkaudit.htmlExtractor import ExtractionOrigin, ResourceCategory, ResourceRef
from linkaudit.prober import OutcomeKind, ProbeOutcome, ProbeResult
from linkaudit.urlModel import AbsoluteUrl

from fixtureServer import FixtureServer


def gammaProfiles(n=200, planted=None):
    model = GammaModel(shape=2.52, scale=30.0)
    counts = np.maximum(np.round(model.quantile((np.arange(n) + 0.5)/n)), 1).astype(int)
    profiles = [HomepageProfile(domain=f"site{i:04d}.test", totalRefs=int(c) + 3, internalCount=3,
                                externalCount=int(c)) for i, c in enumerate(counts)]
    if planted is not None:
        profiles.append(HomepageProfile(domain="planted.test", totalRefs=planted, externalCount=planted))
    return profiles


def brokenResults(n):
    page = AbsoluteUrl.parse("https://site.test/")
    results = []
    for i in range(n):
        url = AbsoluteUrl.parse(f"https://cdn.other.test/{i}.png")
        ref = ResourceRef.make(page, url, ResourceCategory.IMAGE, ExtractionOrigin.STATIC_HTML, str(url))
        status = 404 if i % 2 else 200
        outcome = ProbeOutcome(url=url, kind=OutcomeKind.HTTP_RESPONSE, status=status)
        results.append(ProbeResult.fromOutcome(ref, outcome))
    return results


class CliTestCase(lsst.utils.tests.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.dir, ignore_errors=True)

    def path(self, name):
        return os.path.join(self.dir, name)

    def read(self, name):
        with open(self.path(name), encoding="utf-8") as f:
            return f.read()

    def write(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as f:
            f.write(text)
        return self.path(name)

    def testUsageErrors(self):
        sites = self.write("sites.csv", "GlobalRank,Domain\n1,a.test\n")
        self.assertEqual(main(["scan", "--input", sites, "--out", self.path("r.jsonl"), "--top", "0"]), 2)
        self.assertEqual(main(["scan", "--input", sites]), 2)
        self.assertEqual(main([]), 2)
        self.assertEqual(main(["report", "--input", sites, "--format", "xml"]), 2)
        self.assertEqual(main(["scan", "--input", sites, "--out", self.path("r.jsonl"), "--top", "1",
                               "--concurrency", "1", "--per-host", "4"]), 2)
        self.assertFalse(os.path.exists(self.path("r.jsonl")))

    def testMissingInput(self):
        self.assertEqual(main(["report", "--input", self.path("nothing.jsonl")]), 1)

    def testFit(self):
        profiles = self.path("profiles.jsonl")
        writeProfiles(profiles, gammaProfiles())
        self.assertEqual(main(["fit", "--input", profiles, "--out", self.path("model.json")]), 0)
        model = readModel(self.path("model.json"))
        self.assertEqual(model.series, "external")
        self.assertEqual(model.n, 200)
        self.assertFloatsAlmostEqual(model.shape, 2.52, rtol=0.1)
        self.assertEqual(model.alphaDefault, 0.001)

        self.assertEqual(main(["fit", "--input", profiles, "--out", self.path("total.json"),
                               "--series", "total", "--alpha", "0.01"]), 0)
        total = readModel(self.path("total.json"))
        self.assertEqual(total.series, "total")
        self.assertEqual(total.alphaDefault, 0.01)
        self.assertGreater(total.mean, model.mean)

        self.assertEqual(main(["fit", "--input", profiles, "--out", self.path("x.json"),
                               "--alpha", "0.7"]), 2)

    def testFitDegenerate(self):
        profiles = self.path("flat.jsonl")
        writeProfiles(profiles, [HomepageProfile(domain=f"s{i}.test", totalRefs=5, externalCount=5)
                                 for i in range(10)])
        self.assertEqual(main(["fit", "--input", profiles, "--out", self.path("model.json")]), 1)
        self.assertFalse(os.path.exists(self.path("model.json")))

    def testDetect(self):
        profiles = self.path("profiles.jsonl")
        writeProfiles(profiles, gammaProfiles(planted=500))
        self.assertEqual(main(["fit", "--input", profiles, "--out", self.path("model.json")]), 0)
        self.assertEqual(main(["detect", "--input", profiles, "--model", self.path("model.json"),
                               "--out", self.path("flagged.csv")]), 0)
        lines = self.read("flagged.csv").splitlines()
        self.assertEqual(lines[0], "domain,observed,tail_prob,side,flagged")
        self.assertTrue(lines[1].startswith("planted.test,500,"))
        self.assertTrue(lines[1].endswith(",HighTail,1"))

        self.assertEqual(main(["detect", "--input", profiles, "--model", self.path("model.json"),
                               "--all", "--out", self.path("all.csv")]), 0)
        self.assertEqual(len(self.read("all.csv").splitlines()), 1 + 201)

    def testReport(self):
        bulk = HomepageProfile(domain="bulk.test", totalRefs=6325915, externalCount=6325915)
        bulk.externalPerCategory[ResourceCategory.IMAGE] = 2536692
        bulk.externalPerCategory[ResourceCategory.SCRIPT] = 6325915 - 2536692
        bulk.perCategory.update(bulk.externalPerCategory)
        profiles = self.path("profiles.jsonl")
        writeProfiles(profiles, [bulk])
        self.assertEqual(main(["report", "--input", profiles, "--out", self.path("report.md"),
                               "--population", "1000"]), 0)
        text = self.read("report.md")
        self.assertIn("| Image | 2 536 692 | 40.1% |", text)
        self.assertIn("Projected sites with a broken link: 0 of 1,000", text)

        self.assertEqual(main(["report", "--input", profiles, "--format", "json",
                               "--out", self.path("report.json")]), 0)
        self.assertEqual(json.loads(self.read("report.json"))["totalExternalRefs"], 6325915)

    def testHistogram(self):
        profiles = self.path("profiles.jsonl")
        writeProfiles(profiles, gammaProfiles())
        main(["fit", "--input", profiles, "--out", self.path("model.json")])
        self.assertEqual(main(["report", "--input", profiles, "--out", self.path("report.md"),
                               "--histogram", self.path("hist.csv"), "--model", self.path("model.json"),
                               "--bin-width", "10"]), 0)
        rows = self.read("hist.csv").splitlines()
        self.assertEqual(rows[0], "bin_lower,count,expected_count")
        self.assertEqual(sum(int(row.split(",")[1]) for row in rows[1:]), 200)

    def testSample(self):
        results = self.path("results.jsonl")
        appendResults(results, brokenResults(40))
        for name in ("a.jsonl", "b.jsonl"):
            self.assertEqual(main(["sample", "--input", results, "--n", "5", "--seed", "7",
                                   "--out", self.path(name)]), 0)
        self.assertEqual(self.read("a.jsonl"), self.read("b.jsonl"))
        records = [json.loads(line) for line in self.read("a.jsonl").splitlines()]
        self.assertEqual(len(records), 5)
        self.assertTrue(all(r["broken"] for r in records))
        self.assertEqual(main(["sample", "--input", results, "--n", "21"]), 1)

    def testTriage(self):
        results = self.path("results.jsonl")
        appendResults(results, brokenResults(10))
        resolver = self.write("resolver.txt", "other.test NXDOMAIN\n")
        self.assertEqual(main(["triage", "--input", results, "--out", self.path("plain.md")]), 0)
        self.assertIn("| Untriaged | 5 | 100.0% |", self.read("plain.md"))
        self.assertEqual(main(["triage", "--input", results, "--recheck", "--resolver-file", resolver,
                               "--format", "csv", "--out", self.path("watch.csv")]), 0)
        self.assertEqual(self.read("watch.csv"), "domain,dns_state,broken\nother.test,NxDomain,5\n")


class CliScanTestCase(lsst.utils.tests.TestCase):

    def setUp(self):
        self.dir = tempfile.mkdtemp()
        self.server = FixtureServer().start()
        for host in ("a.test", "b.test"):
            self.server.add(host, "/", body='<img src="http://cdn.fixture.test/gone.png"><img src="/ok.png">')
            self.server.add(host, "/ok.png", body=b"\x89PNG", contentType="image/png")

    def tearDown(self):
        self.server.stop()
        shutil.rmtree(self.dir, ignore_errors=True)

    def testScanAndReport(self):
        sites = os.path.join(self.dir, "sites.csv")
        with open(sites, "w") as f:
            f.write("GlobalRank,Domain\n1,a.test\n2,b.test\n3,missing.test\n4,skipped.test\n")
        resolver = os.path.join(self.dir, "resolver.txt")
        with open(resolver, "w") as f:
            f.write("\n".join(self.server.resolverLines(["a.test", "b.test", "cdn.fixture.test"])) + "\n")
        override = os.path.join(self.dir, "scan.py")
        with open(override, "w") as f:
            f.write("config.homepageSchemes = ['http']\nconfig.retries = 0\n")
        out = os.path.join(self.dir, "results.jsonl")
        args = ["scan", "--input", sites, "--out", out, "--top", "3", "--resolver-file", resolver,
                "--config-file", override, "--timeout", "2"]
        self.assertEqual(main(args), 0)

        with open(out + ".manifest.json") as f:
            manifest = json.load(f)
        self.assertEqual((manifest["pages_attempted"], manifest["pages_succeeded"],
                          manifest["pages_failed"]), (3, 2, 1))
        self.assertEqual(manifest["top_n"], 3)
        self.assertEqual(manifest["config"]["homepageSchemes"], ["http"])

        self.assertEqual(main(args + ["--resume"]), 0)
        self.assertEqual(self.server.requests[("a.test", "/")], 1)
        self.assertEqual(self.server.requests[("cdn.fixture.test", "/gone.png")], 1)

        report = os.path.join(self.dir, "report.csv")
        self.assertEqual(main(["report", "--input", out, "--format", "csv", "--out", report]), 0)
        with open(report) as f:
            self.assertEqual(f.read().splitlines(),
                             ["table,category,count,percentage", "external,Image,2,100.0",
                              "broken_external,Image,2,100.0"])


class TestMemory(lsst.utils.tests.MemoryTestCase):
    pass


def setup_module(module):
    lsst.utils.tests.init()


if __name__ == "__main__":
    lsst.utils.tests.init()
    unittest.main()
