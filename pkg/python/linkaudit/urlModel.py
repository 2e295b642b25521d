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

"""URL normalization, registrable domains and reference scope.
"""

import enum
import io
import ipaddress
import os
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional
from urllib.parse import urljoin, urlsplit

from publicsuffixlist import PublicSuffixList

from lsst.utils.logging import getLogger

__all__ = ("AbsoluteUrl", "Scope", "UnparsableUrl", "UnsupportedScheme", "SuffixRules",
           "defaultSuffixRules", "normalizeUrl", "registrableDomain", "classifyScope",
           "isHostExternal", "isIpLiteral", "SUPPORTED_SCHEMES")

logger = getLogger("linkaudit.urlModel")

SUPPORTED_SCHEMES = ("http", "https")
DEFAULT_PORTS = {"http": 80, "https": 443}
SUFFIX_FILE = os.path.join(os.path.dirname(__file__), "data", "suffixes.dat")

_SCHEME_RE = re.compile(r"^([a-zA-Z][a-zA-Z0-9+.\-]*):")
_LABEL_RE = re.compile(r"^[\w\-]+$", re.UNICODE)


class UnparsableUrl(ValueError):
    """Raised when a reference cannot be turned into an absolute URL."""


class UnsupportedScheme(ValueError):
    """Raised for references using a scheme other than http or https."""


class Scope(enum.Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


def isIpLiteral(host):
    try:
        ipaddress.ip_address(host.strip("[]"))
    except ValueError:
        return False
    return True


@dataclass(frozen=True)
class AbsoluteUrl:
    """A normalized http(s) URL.

    The host is always lowercase and default ports are dropped, so that
    ``AbsoluteUrl.parse(str(url)) == url`` holds for every instance built by
    `normalizeUrl`.
    """
    scheme: str
    host: str
    port: Optional[int]
    path: str
    query: Optional[str] = None

    def __post_init__(self):
        if self.scheme not in SUPPORTED_SCHEMES:
            raise UnsupportedScheme(f"Unsupported scheme {self.scheme!r}")
        if not self.host or self.host != self.host.lower():
            raise UnparsableUrl(f"Host must be non-empty and lowercase: {self.host!r}")

    @classmethod
    def parse(cls, text):
        """Parse an absolute URL string."""
        return normalizeUrl(text, None)

    @property
    def netloc(self):
        host = f"[{self.host}]" if ":" in self.host else self.host
        if self.port is not None:
            return f"{host}:{self.port}"
        return host

    @property
    def origin(self):
        return f"{self.scheme}://{self.netloc}"

    def __str__(self):
        text = f"{self.scheme}://{self.netloc}{self.path}"
        if self.query is not None:
            text += "?" + self.query
        return text


def _checkHost(host, raw):
    if isIpLiteral(host):
        return host
    if host.endswith("."):
        host = host[:-1]
    labels = host.split(".")
    if not host or any(not label or not _LABEL_RE.match(label) for label in labels):
        raise UnparsableUrl(f"Malformed host {host!r} in {raw!r}")
    return host


def normalizeUrl(raw, base):
    """Turn a raw reference into an `AbsoluteUrl`.

    Parameters
    ----------
    raw : `str`
        Reference text as it appears in the page.
    base : `AbsoluteUrl` or `None`
        Base against which relative and scheme-relative references are
        resolved. With ``None`` only absolute references are accepted.

    Returns
    -------
    url : `AbsoluteUrl`
        Normalized URL: host lowercased, fragment stripped, query kept,
        default port dropped, empty path replaced by ``/``.

    Raises
    ------
    UnparsableUrl
        If the text is empty or does not yield a well-formed host.
    UnsupportedScheme
        If the reference uses a scheme other than http or https.
    """
    text = raw.strip() if raw is not None else ""
    if not text:
        raise UnparsableUrl("Empty reference")
    match = _SCHEME_RE.match(text)
    if match and match.group(1).lower() not in SUPPORTED_SCHEMES:
        raise UnsupportedScheme(f"Unsupported scheme {match.group(1)!r} in {raw!r}")
    if base is None:
        if not match:
            raise UnparsableUrl(f"Relative reference {raw!r} without a base")
        joined = text
    else:
        joined = urljoin(str(base), text)

    try:
        parts = urlsplit(joined)
        port = parts.port
    except ValueError as e:
        raise UnparsableUrl(f"Cannot parse {raw!r}: {e}") from e
    scheme = parts.scheme.lower()
    if scheme not in SUPPORTED_SCHEMES:
        raise UnsupportedScheme(f"Unsupported scheme {scheme!r} in {raw!r}")
    if not parts.hostname:
        raise UnparsableUrl(f"No host in {raw!r}")
    host = _checkHost(parts.hostname.lower(), raw)
    if port == DEFAULT_PORTS[scheme]:
        port = None
    return AbsoluteUrl(scheme=scheme, host=host, port=port, path=parts.path or "/",
                       query=parts.query or None)


class SuffixRules:
    """Public-suffix rule set used to derive registrable domains.

    Parameters
    ----------
    overridePath : `str`, optional
        Plain text file with one extra rule per line; ``#`` starts a
        comment. Rules use the public suffix list syntax.
    """
    def __init__(self, overridePath=None):
        with open(SUFFIX_FILE, "rb") as f:
            data = f.read()
        if overridePath is not None:
            extra = []
            with open(overridePath, encoding="utf-8") as f:
                for line in f:
                    rule = line.split("#", 1)[0].strip()
                    if rule:
                        extra.append(rule)
            logger.debug("Loaded %d suffix overrides from %s", len(extra), overridePath)
            data = "\n".join(extra).encode("utf-8") + b"\n" + data
        self._psl = PublicSuffixList(io.BytesIO(data), accept_unknown=False)

    def registrableDomain(self, host):
        host = host.lower().rstrip(".")
        if isIpLiteral(host):
            return host
        domain = self._psl.privatesuffix(host)
        if domain:
            return domain
        return ".".join(host.split(".")[-2:])

    def isPublicSuffix(self, name):
        """Return `True` if ``name`` is a suffix under these rules or the full list.

        The full list bundled with ``publicsuffixlist`` is consulted so that
        recent generic suffixes missing from the compact rules still count.
        """
        name = name.lower()
        if self._psl.is_public(name):
            return True
        return bool(_fullSuffixList().is_public(name))


@lru_cache(maxsize=None)
def _fullSuffixList():
    return PublicSuffixList(accept_unknown=False)


@lru_cache(maxsize=None)
def defaultSuffixRules():
    return SuffixRules()


def registrableDomain(host, rules=None):
    """Return the eTLD+1 of ``host``.

    IP literals are returned verbatim; when no suffix rule matches the last
    two labels are used.
    """
    if not host:
        raise ValueError("Host must be non-empty")
    rules = rules or defaultSuffixRules()
    return rules.registrableDomain(host)


def classifyScope(resource, origin, rules=None):
    """Return `Scope.EXTERNAL` iff the registrable domains differ."""
    if registrableDomain(resource.host, rules) == registrableDomain(origin.host, rules):
        return Scope.INTERNAL
    return Scope.EXTERNAL


def isHostExternal(resource, origin):
    """Host-inequality variant of the external test, reported alongside `classifyScope`."""
    return resource.host.lower() != origin.host.lower()
