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

import enum
import json
from dataclasses import dataclass

from bs4 import BeautifulSoup

import lsst.pipe.base as pipeBase
from lsst.utils.logging import getLogger

from .urlModel import (AbsoluteUrl, Scope, UnparsableUrl, UnsupportedScheme, classifyScope,
                       isHostExternal, normalizeUrl)

__all__ = ("ResourceCategory", "ExtractionOrigin", "ResourceRef", "MalformedRecord",
           "extractPage", "extractRefs", "ingestFetchLog", "categoryFromContentType")

logger = getLogger("linkaudit.htmlExtractor")


class ResourceCategory(enum.Enum):
    IMAGE = "Image"
    SCRIPT = "Script"
    STYLESHEET = "Stylesheet"
    FONT = "Font"
    XHR = "Xhr"
    FETCH = "Fetch"
    MEDIA = "Media"
    DOCUMENT = "Document"
    OTHER = "Other"


DYNAMIC_CATEGORIES = (ResourceCategory.XHR, ResourceCategory.FETCH)


class ExtractionOrigin(enum.Enum):
    STATIC_HTML = "StaticHtml"
    DYNAMIC_LOG = "DynamicLog"


class MalformedRecord(ValueError):
    """Raised for a fetch-log or results record missing required fields."""


@dataclass(frozen=True)
class ResourceRef:
    """One reference found on a homepage.

    ``scope`` is always ``classifyScope(url, originPage)``; ``hostExternal``
    records the host-inequality variant of the same test.
    """
    originPage: AbsoluteUrl
    url: AbsoluteUrl
    category: ResourceCategory
    scope: Scope
    extractionOrigin: ExtractionOrigin
    rawText: str
    hostExternal: bool = False

    @classmethod
    def make(cls, originPage, url, category, extractionOrigin, rawText, rules=None):
        return cls(originPage=originPage, url=url, category=category,
                   scope=classifyScope(url, originPage, rules),
                   extractionOrigin=extractionOrigin, rawText=rawText,
                   hostExternal=isHostExternal(url, originPage))

    @property
    def key(self):
        return (str(self.originPage), str(self.url), self.category.value)


# Fetchable URL attributes per element.
_URL_ATTRIBUTES = {
    "img": ("src", "srcset"),
    "script": ("src",),
    "link": ("href",),
    "audio": ("src",),
    "video": ("src", "poster"),
    "source": ("src", "srcset"),
    "track": ("src",),
    "iframe": ("src",),
    "frame": ("src",),
    "a": ("href",),
    "area": ("href",),
    "embed": ("src",),
    "object": ("data",),
    "input": ("src",),
}

_SKIPPED_PREFIXES = ("#", "about:", "mailto:", "tel:", "javascript:", "data:", "blob:")


def _elementCategory(tag, attr):
    name = tag.name
    if name == "img":
        return ResourceCategory.IMAGE
    if name == "script":
        return ResourceCategory.SCRIPT
    if name == "link":
        rel = [r.lower() for r in (tag.get("rel") or [])]
        if "stylesheet" in rel:
            return ResourceCategory.STYLESHEET
        if "preload" in rel and (tag.get("as") or "").lower() == "font":
            return ResourceCategory.FONT
        return ResourceCategory.OTHER
    if name == "source":
        parent = tag.parent.name if tag.parent is not None else None
        if parent == "picture" or attr == "srcset":
            return ResourceCategory.IMAGE
        return ResourceCategory.MEDIA
    if name == "video" and attr == "poster":
        return ResourceCategory.IMAGE
    if name in ("audio", "video") and attr == "src":
        return ResourceCategory.MEDIA
    if name in ("iframe", "frame"):
        return ResourceCategory.DOCUMENT
    return ResourceCategory.OTHER


def _splitSrcset(value):
    """Return the URL of every candidate in a srcset attribute.

    A candidate URL runs up to the next whitespace and may itself contain
    commas; only a trailing comma separates it from the next candidate.
    Descriptors (``2x``, ``480w``) are skipped up to the next comma.
    """
    urls = []
    pos = 0
    n = len(value)
    while pos < n:
        while pos < n and (value[pos].isspace() or value[pos] == ","):
            pos += 1
        end = pos
        while end < n and not value[end].isspace():
            end += 1
        url = value[pos:end]
        pos = end
        if url.endswith(","):
            url = url.rstrip(",")
        else:
            while pos < n and value[pos] != ",":
                pos += 1
        if url:
            urls.append(url)
    return urls


def extractPage(html, origin, rules=None):
    """Extract resource references from homepage markup.

    Parameters
    ----------
    html : `str`
        Decoded homepage body; malformed markup is tolerated.
    origin : `AbsoluteUrl`
        URL the page was served from.
    rules : `SuffixRules`, optional
        Suffix rules for scope classification.

    Returns
    -------
    result : `lsst.pipe.base.Struct`
        ``refs``
            Deduplicated list of `ResourceRef`, unique by
            (origin, url, category), in document order.
        ``rejected``
            List of ``(raw, reason)`` for http(s) references that could not
            be normalized.
    """
    soup = BeautifulSoup(html or "", "html.parser")
    base = origin
    refs = []
    seen = set()
    rejected = []
    nSkipped = 0
    for tag in soup.find_all(True):
        if tag.name == "base" and tag.get("href"):
            try:
                base = normalizeUrl(tag["href"], origin)
            except ValueError as e:
                logger.debug("Ignoring base href on %s: %s", origin, e)
            continue
        attrs = _URL_ATTRIBUTES.get(tag.name)
        if attrs is None:
            continue
        for attr in attrs:
            value = tag.get(attr)
            if not isinstance(value, str) or not value.strip():
                continue
            raws = _splitSrcset(value) if attr == "srcset" else [value.strip()]
            for raw in raws:
                if raw.lower().startswith(_SKIPPED_PREFIXES):
                    nSkipped += 1
                    continue
                try:
                    url = normalizeUrl(raw, base)
                except UnsupportedScheme:
                    nSkipped += 1
                    continue
                except UnparsableUrl as e:
                    rejected.append((raw, str(e)))
                    continue
                ref = ResourceRef.make(origin, url, _elementCategory(tag, attr),
                                       ExtractionOrigin.STATIC_HTML, raw, rules)
                if ref.key in seen:
                    continue
                seen.add(ref.key)
                refs.append(ref)
    logger.trace("%s: %d refs, %d rejected, %d skipped", origin, len(refs), len(rejected), nSkipped)
    return pipeBase.Struct(refs=refs, rejected=rejected)


def extractRefs(html, origin, rules=None):
    return extractPage(html, origin, rules).refs


def _parseLogLine(line):
    if isinstance(line, dict):
        return line
    line = line.strip()
    if not line:
        return None
    try:
        record = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedRecord(f"Not JSON: {e}") from e
    if not isinstance(record, dict):
        raise MalformedRecord("Record is not an object")
    return record


def ingestFetchLog(logLines, origin, rules=None):
    """Turn runtime request observations into Xhr/Fetch references.

    Each record is a JSON object ``{page, url, initiator}`` (or an already
    decoded `dict`), with ``initiator`` one of ``xhr`` or ``fetch``. Records
    for another page than ``origin`` are ignored.

    Returns
    -------
    result : `lsst.pipe.base.Struct`
        ``refs`` (list of `ResourceRef`) and ``nMalformed`` (`int`).
    """
    refs = []
    seen = set()
    nMalformed = 0
    for line in logLines:
        try:
            record = _parseLogLine(line)
            if record is None:
                continue
            page = record.get("page")
            if page is not None and not isinstance(page, str):
                raise MalformedRecord(f"page is not a string in {record!r}")
            if page:
                pageUrl = normalizeUrl(page, None)
                if (pageUrl.host, pageUrl.path) != (origin.host, origin.path):
                    continue
            raw = record.get("url")
            initiator = str(record.get("initiator", "")).lower()
            if not isinstance(raw, str) or not raw or initiator not in ("xhr", "fetch"):
                raise MalformedRecord(f"Missing url or bad initiator in {record!r}")
            url = normalizeUrl(raw, origin)
        except (MalformedRecord, UnparsableUrl, UnsupportedScheme) as e:
            logger.debug("Skipping fetch-log record: %s", e)
            nMalformed += 1
            continue
        category = ResourceCategory.XHR if initiator == "xhr" else ResourceCategory.FETCH
        ref = ResourceRef.make(origin, url, category, ExtractionOrigin.DYNAMIC_LOG, raw, rules)
        if ref.key not in seen:
            seen.add(ref.key)
            refs.append(ref)
    return pipeBase.Struct(refs=refs, nMalformed=nMalformed)


_SCRIPT_TYPES = ("text/javascript", "application/javascript", "application/x-javascript")


def categoryFromContentType(contentType):
    """Map a Content-Type header to a `ResourceCategory`, ignoring parameters."""
    mediaType = (contentType or "").split(";", 1)[0].strip().lower()
    if mediaType.startswith("image/"):
        return ResourceCategory.IMAGE
    if mediaType in _SCRIPT_TYPES:
        return ResourceCategory.SCRIPT
    if mediaType == "text/css":
        return ResourceCategory.STYLESHEET
    if mediaType.startswith("font/") or mediaType.startswith("application/font-"):
        return ResourceCategory.FONT
    if mediaType.startswith("audio/") or mediaType.startswith("video/"):
        return ResourceCategory.MEDIA
    if mediaType == "text/html":
        return ResourceCategory.DOCUMENT
    return ResourceCategory.OTHER
