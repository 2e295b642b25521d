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

"""DNS lookups shared by triage and by the prober's host pinning.
"""

import abc
from dataclasses import dataclass
from typing import Optional

import dns.exception
import dns.resolver
import dns.rdatatype

from lsst.utils.logging import getLogger

__all__ = ("NOERROR", "NXDOMAIN", "SERVFAIL", "DnsAnswer", "DnsLookup", "DnsPythonLookup",
           "StubLookup")

logger = getLogger("linkaudit.dnsLookup")

NOERROR = "NOERROR"
NXDOMAIN = "NXDOMAIN"
SERVFAIL = "SERVFAIL"


@dataclass(frozen=True)
class DnsAnswer:
    """Result of looking up one name.

    ``cname`` is the canonical-name target when the name is an alias;
    ``address`` is a pinned ``host[:port]`` connection target, only ever
    set by `StubLookup`.
    """
    rcode: str
    cname: Optional[str] = None
    address: Optional[str] = None

    @property
    def exists(self):
        return self.rcode == NOERROR

    @property
    def nxdomain(self):
        return self.rcode == NXDOMAIN


class DnsLookup(abc.ABC):
    """Interface used by `resolveDnsState` and `ProbeTask`."""

    @abc.abstractmethod
    def lookup(self, name):
        """Look up ``name`` and return a `DnsAnswer`."""

    def follow(self, name, maxHops=8):
        """Follow the CNAME chain starting at ``name``.

        Returns
        -------
        finalName : `str`
            Last name of the chain.
        answer : `DnsAnswer`
            Answer for ``finalName``.
        """
        name = name.lower().rstrip(".")
        seen = {name}
        answer = self.lookup(name)
        while answer.cname and answer.cname not in seen and len(seen) <= maxHops:
            name = answer.cname
            seen.add(name)
            answer = self.lookup(name)
        return name, answer


class DnsPythonLookup(DnsLookup):
    """Live lookups through dnspython.

    Parameters
    ----------
    timeout : `float`
        Lifetime of one query, in seconds.
    nameservers : `list` of `str`, optional
        Servers to query instead of the system configuration.
    """
    def __init__(self, timeout=5.0, nameservers=None):
        self.resolver = dns.resolver.Resolver()
        if nameservers:
            self.resolver.nameservers = list(nameservers)
        self.resolver.timeout = timeout
        self.resolver.lifetime = timeout

    def lookup(self, name):
        try:
            answer = self.resolver.resolve(name, dns.rdatatype.CNAME, raise_on_no_answer=False)
        except dns.resolver.NXDOMAIN:
            return DnsAnswer(NXDOMAIN)
        except dns.exception.DNSException as e:
            logger.debug("Lookup of %s failed: %s", name, e)
            return DnsAnswer(SERVFAIL)
        if answer.rrset is not None and len(answer.rrset) > 0:
            target = answer.rrset[0].target.to_text(omit_final_dot=True).lower()
            return DnsAnswer(NOERROR, cname=target)
        return DnsAnswer(NOERROR)


class StubLookup(DnsLookup):
    """Deterministic resolver read from a fixture file.

    Lines are ``host A [address[:port]]``, ``host CNAME target`` or
    ``host NXDOMAIN``; ``#`` starts a comment. A name that is not listed
    exists only if one of its descendants is listed with ``A`` or
    ``CNAME`` (an empty non-terminal), and is NXDOMAIN otherwise.
    """
    def __init__(self, entries=None):
        self.entries = {}
        for line in entries or []:
            self.addLine(line)

    @classmethod
    def fromFile(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls(f)

    def addLine(self, line):
        fields = line.split("#", 1)[0].split()
        if not fields:
            return
        if len(fields) < 2:
            raise ValueError(f"Malformed stub resolver line: {line!r}")
        host, kind = fields[0].lower().rstrip("."), fields[1].upper()
        if kind == "A":
            self.entries[host] = DnsAnswer(NOERROR, address=fields[2] if len(fields) > 2 else None)
        elif kind == "CNAME" and len(fields) == 3:
            self.entries[host] = DnsAnswer(NOERROR, cname=fields[2].lower().rstrip("."))
        elif kind == "NXDOMAIN":
            self.entries[host] = DnsAnswer(NXDOMAIN)
        elif kind == "SERVFAIL":
            self.entries[host] = DnsAnswer(SERVFAIL)
        else:
            raise ValueError(f"Malformed stub resolver line: {line!r}")

    def lookup(self, name):
        name = name.lower().rstrip(".")
        if name in self.entries:
            return self.entries[name]
        suffix = "." + name
        for host, answer in self.entries.items():
            if host.endswith(suffix) and answer.exists:
                return DnsAnswer(NOERROR)
        return DnsAnswer(NXDOMAIN)
