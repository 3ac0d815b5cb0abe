"""
Content-addressed preservation store.

Bodies live under objects/<first2>/<sha256>; store/manifest.jsonl maps each
canonical URL to its latest ingest. Content is kept in the format it was
collected in and every read re-verifies the digest.
"""

import hashlib
import json
import logging
import mimetypes
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union
from urllib.parse import urlsplit, urlunsplit

from crawler import Fetcher
from errors import (EmptyBody, IntegrityFailure, InvalidUrl, MalformedMediaType,
                    MissingContentType, StorageFailure)
from negotiation import MediaType, parse_media_type

logger = logging.getLogger(__name__)

TIMESTAMP_FORMAT = '%Y-%m-%dT%H:%M:%SZ'
MANIFEST_NAME = 'manifest.jsonl'
OBJECTS_DIR = 'objects'

SOURCE_FETCHED = 'fetched'
SOURCE_IMPORTED = 'imported'

GIF = MediaType('image', 'gif')
PNG = MediaType('image', 'png')
HTML = MediaType('text', 'html')
TEXT = MediaType('text', 'plain')
OCTET_STREAM = MediaType('application', 'octet-stream')

_TEXT_CONTROL_OK = {0x08, 0x09, 0x0a, 0x0c, 0x0d, 0x1b}


def canonicalize_url(url: str) -> str:
    """Lowercase scheme and host, drop the fragment, keep query and escapes as given."""
    if not isinstance(url, str) or not url.strip():
        raise InvalidUrl(f"not a URL: {url!r}")
    parts = urlsplit(url.strip())
    scheme = parts.scheme.lower()
    if scheme not in ('http', 'https') or not parts.hostname:
        raise InvalidUrl(f"not an absolute http(s) URL: {url!r}")
    try:
        parts.port
    except ValueError as e:
        raise InvalidUrl(f"bad port in {url!r}") from e
    userinfo, at, hostport = parts.netloc.rpartition('@')
    netloc = f"{userinfo}{at}{hostport.lower()}"
    return urlunsplit((scheme, netloc, parts.path or '/', parts.query, ''))


def format_timestamp(moment: datetime) -> str:
    return moment.astimezone(timezone.utc).strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, TIMESTAMP_FORMAT).replace(tzinfo=timezone.utc)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_atomic(path: Path, data: bytes) -> None:
    """Write to a temp file in the same directory, fsync, then rename over path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def sniff_magic(body: bytes) -> Optional[MediaType]:
    """Identify GIF, PNG and HTML by their leading bytes."""
    if body.startswith((b'GIF87a', b'GIF89a')):
        return GIF
    if body.startswith(b'\x89PNG\r\n\x1a\n'):
        return PNG
    head = body[:64]
    if head.startswith(b'\xef\xbb\xbf'):
        head = head[3:]
    head = head.lstrip().lower()
    if head.startswith((b'<!doctype', b'<html')):
        return HTML
    return None


def looks_like_text(body: bytes) -> bool:
    sample = body[:4096]
    if b'\x00' in sample:
        return False
    try:
        sample.decode('utf-8')
    except UnicodeDecodeError as e:
        # a multi-byte sequence cut by the sample boundary is still text
        if not (len(body) > len(sample) and e.start >= len(sample) - 3):
            return False
    return all(b >= 0x20 or b in _TEXT_CONTROL_OK for b in sample)


def sniff_media_type(body: bytes) -> Optional[MediaType]:
    """Magic bytes first, then the text heuristic; None when nothing fits."""
    found = sniff_magic(body)
    if found is not None:
        return found
    if looks_like_text(body):
        return TEXT
    return None


@dataclass(frozen=True)
class PreservedResource:
    url: str
    media_type: MediaType
    body: bytes = field(repr=False)
    digest: str
    collected_at: datetime
    source: str


@dataclass(frozen=True)
class ManifestEntry:
    url: str
    digest: str
    media_type: str
    collected_at: str
    source: str
    byte_length: int

    def to_record(self) -> dict:
        return {
            'url': self.url,
            'digest': self.digest,
            'media_type': self.media_type,
            'collected_at': self.collected_at,
            'source': self.source,
            'byte_length': self.byte_length,
        }

    @classmethod
    def from_record(cls, record: dict) -> 'ManifestEntry':
        return cls(
            url=record['url'],
            digest=record['digest'],
            media_type=record['media_type'],
            collected_at=record['collected_at'],
            source=record['source'],
            byte_length=int(record['byte_length']),
        )


@dataclass
class VerifyReport:
    total: int = 0
    ok: int = 0
    failed: List[str] = field(default_factory=list)


class Store:
    """
    Preserves collected resources and hands them to the gateway by URL.

    Readers work from an immutable snapshot of the manifest; ingests
    serialize through one writer lock and publish a new snapshot only after
    the manifest file has been atomically replaced.
    """

    def __init__(self, config: dict, fetcher: Optional[Fetcher] = None):
        """
        Args:
            config: Dictionary with a 'store' section containing 'path'
                (plus the crawler keys read by Fetcher).
            fetcher: Fetcher for ingest_fetch; built from config when omitted.
        """
        store_config = config.get('store', {})
        self.root = Path(store_config.get('path', 'store'))
        self.objects_dir = self.root / OBJECTS_DIR
        self.manifest_path = self.root / MANIFEST_NAME
        self.fetcher = fetcher or Fetcher(config)

        self._write_lock = threading.Lock()
        self._entries: Dict[str, ManifestEntry] = {}
        self._manifest_stamp = None

        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageFailure(f"cannot create store at {self.root}: {e}") from e
        with self._write_lock:
            self._reload_locked()

        logger.info(f"Store opened at {self.root} ({len(self._entries)} resources)")

    # -- manifest -----------------------------------------------------------

    def _stamp(self):
        try:
            st = self.manifest_path.stat()
        except FileNotFoundError:
            return None
        return st.st_mtime_ns, st.st_size, st.st_ino

    def _reload_locked(self) -> None:
        stamp = self._stamp()
        entries: Dict[str, ManifestEntry] = {}
        if stamp is not None:
            with open(self.manifest_path, 'r', encoding='utf-8') as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        entry = ManifestEntry.from_record(json.loads(line))
                    except (ValueError, KeyError, TypeError) as e:
                        logger.error(f"Skipping bad manifest line {lineno}: {e}")
                        continue
                    entries[entry.url] = entry
        self._entries = entries
        self._manifest_stamp = stamp

    def _maybe_reload(self) -> None:
        # another process (e.g. the ingest command) may have rewritten the manifest
        if self._stamp() != self._manifest_stamp:
            with self._write_lock:
                if self._stamp() != self._manifest_stamp:
                    self._reload_locked()

    def _write_manifest_locked(self, entries: Dict[str, ManifestEntry]) -> None:
        lines = [
            json.dumps(entries[url].to_record(), separators=(',', ':'), ensure_ascii=False)
            for url in sorted(entries)
        ]
        data = ''.join(line + '\n' for line in lines).encode('utf-8')
        write_atomic(self.manifest_path, data)
        self._entries = entries
        self._manifest_stamp = self._stamp()

    def entries(self) -> Dict[str, ManifestEntry]:
        """Snapshot of the manifest keyed by canonical URL."""
        self._maybe_reload()
        return dict(self._entries)

    def __len__(self):
        return len(self.entries())

    def _object_path(self, digest: str) -> Path:
        return self.objects_dir / digest[:2] / digest

    # -- ingest -------------------------------------------------------------

    def ingest_bytes(self, url: str, media_type: Union[MediaType, str], body: bytes,
                     collected_at: Optional[datetime] = None,
                     source: str = SOURCE_IMPORTED) -> str:
        """
        Preserve body for url in its original media type.

        Returns:
            The SHA-256 hex digest of body.

        Raises:
            InvalidUrl, EmptyBody, StorageFailure
        """
        canonical = canonicalize_url(url)
        if not body:
            raise EmptyBody(f"refusing to preserve an empty body for {canonical}")
        if not isinstance(media_type, MediaType):
            media_type = parse_media_type(media_type)
        moment = collected_at or datetime.now(timezone.utc)
        if moment.tzinfo is None:
            moment = moment.replace(tzinfo=timezone.utc)

        digest = sha256_hex(body)
        entry = ManifestEntry(
            url=canonical,
            digest=digest,
            media_type=str(media_type),
            collected_at=format_timestamp(moment),
            source=source,
            byte_length=len(body),
        )

        with self._write_lock:
            try:
                if self._stamp() != self._manifest_stamp:
                    self._reload_locked()
                obj_path = self._object_path(digest)
                if not obj_path.exists():
                    write_atomic(obj_path, body)
                entries = dict(self._entries)
                entries[canonical] = entry
                self._write_manifest_locked(entries)
            except OSError as e:
                raise StorageFailure(f"could not preserve {canonical}: {e}") from e

        logger.info(f"Preserved {canonical} as {media_type} ({len(body)} bytes, {digest[:12]})")
        return digest

    def ingest_fetch(self, url: str) -> str:
        """
        Collect url from its publisher and preserve the response body.

        Raises:
            InvalidUrl, FetchFailed, PermissionDenied, MissingContentType
        """
        canonical = canonicalize_url(url)
        self.fetcher.check_permission(canonical)
        response = self.fetcher.get(url)
        body = response.content
        media_type = self._media_type_from_header(response.headers.get('Content-Type'), body, canonical)
        return self.ingest_bytes(canonical, media_type, body, source=SOURCE_FETCHED)

    def ingest_file(self, path: Union[str, Path], url: str) -> str:
        """Import a local file as the content of url (magic bytes, then extension, then text)."""
        path = Path(path)
        try:
            body = path.read_bytes()
        except OSError as e:
            raise StorageFailure(f"cannot read {path}: {e}") from e
        media_type = sniff_magic(body)
        if media_type is None:
            guessed, _ = mimetypes.guess_type(path.name)
            if guessed:
                media_type = parse_media_type(guessed)
            elif looks_like_text(body):
                media_type = TEXT
        if media_type is None:
            raise MissingContentType(f"cannot determine the media type of {path}")
        return self.ingest_bytes(url, media_type, body, source=SOURCE_IMPORTED)

    @staticmethod
    def _media_type_from_header(header: Optional[str], body: bytes, url: str) -> MediaType:
        if header:
            try:
                declared = parse_media_type(header)
            except MalformedMediaType:
                logger.warning(f"Unparseable Content-Type {header!r} for {url}, sniffing")
            else:
                if declared.without_params() != OCTET_STREAM:
                    return declared
        sniffed = sniff_media_type(body)
        if sniffed is None:
            raise MissingContentType(f"no usable Content-Type for {url} and sniffing failed")
        logger.info(f"Sniffed {sniffed} for {url}")
        return sniffed

    # -- read ---------------------------------------------------------------

    def _read_verified(self, entry: ManifestEntry) -> bytes:
        try:
            body = self._object_path(entry.digest).read_bytes()
        except OSError as e:
            raise IntegrityFailure(entry.url, f"integrity failure: {entry.url} (body unreadable: {e})") from e
        if sha256_hex(body) != entry.digest:
            raise IntegrityFailure(entry.url)
        return body

    def lookup(self, url: str) -> Optional[PreservedResource]:
        """
        Return the preserved resource for url, or None if it was never collected.

        Raises:
            IntegrityFailure: the stored bytes no longer match the digest.
        """
        try:
            canonical = canonicalize_url(url)
        except InvalidUrl:
            return None
        self._maybe_reload()
        entry = self._entries.get(canonical)
        if entry is None:
            return None
        body = self._read_verified(entry)
        return PreservedResource(
            url=entry.url,
            media_type=parse_media_type(entry.media_type),
            body=body,
            digest=entry.digest,
            collected_at=parse_timestamp(entry.collected_at),
            source=entry.source,
        )

    def verify(self) -> VerifyReport:
        """Re-hash every preserved body; failures are reported, not raised."""
        report = VerifyReport()
        for url, entry in sorted(self.entries().items()):
            report.total += 1
            try:
                self._read_verified(entry)
                report.ok += 1
            except IntegrityFailure:
                logger.error(f"Integrity check failed for {url}")
                report.failed.append(url)
        logger.info(f"Verify: total={report.total} ok={report.ok} failed={len(report.failed)}")
        return report
