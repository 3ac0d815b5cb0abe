"""
Converter registry client: crawls converter manifests published at URLs and
registers the descriptors they list.

A manifest is a JSON document::

    {"version": 1, "converters": [{<descriptor fields>, "sha256": "<hex>"}, ...]}

where each sha256 covers the record's other fields serialized canonically
(sorted keys, no whitespace, UTF-8).
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Mapping, Tuple, Union

from errors import (DigestMismatch, DuplicateId, InvalidDescriptor, MalformedManifest, MigradoError,
                    StoreError)
from registry import KIND_BUILTIN, ConverterDescriptor
from store import SOURCE_FETCHED

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_MEDIA_TYPE = 'application/json'


def canonical_record_bytes(record: Mapping) -> bytes:
    body = {k: v for k, v in record.items() if k != 'sha256'}
    return json.dumps(body, sort_keys=True, separators=(',', ':'), ensure_ascii=False).encode('utf-8')


def record_digest(record: Mapping) -> str:
    return hashlib.sha256(canonical_record_bytes(record)).hexdigest()


def signed_record(descriptor: ConverterDescriptor) -> dict:
    record = descriptor.to_record()
    record['sha256'] = record_digest(record)
    return record


def build_manifest(descriptors: Iterable[ConverterDescriptor]) -> dict:
    """Manifest document publishing descriptors, ready for json.dumps."""
    return {'version': MANIFEST_VERSION, 'converters': [signed_record(d) for d in descriptors]}


@dataclass(frozen=True)
class RegistryManifest:
    version: int
    converters: Tuple[Mapping, ...]

    @classmethod
    def parse(cls, document: Union[bytes, str]) -> 'RegistryManifest':
        """
        Raises:
            MalformedManifest: not JSON, wrong shape, or an id listed twice.
        """
        try:
            if isinstance(document, bytes):
                document = document.decode('utf-8')
            data = json.loads(document)
        except (UnicodeDecodeError, ValueError) as e:
            raise MalformedManifest(f"manifest is not UTF-8 JSON: {e}") from e
        if not isinstance(data, dict):
            raise MalformedManifest("manifest must be a JSON object")
        version = data.get('version')
        if isinstance(version, bool) or not isinstance(version, int):
            raise MalformedManifest(f"manifest version must be an integer, got {version!r}")
        if version != MANIFEST_VERSION:
            raise MalformedManifest(f"unsupported manifest version {version}")
        converters = data.get('converters')
        if not isinstance(converters, list):
            raise MalformedManifest("manifest 'converters' must be a list")

        seen = set()
        for record in converters:
            if isinstance(record, dict) and 'id' in record:
                converter_id = record['id']
                if not isinstance(converter_id, str):
                    continue
                if converter_id in seen:
                    raise MalformedManifest(f"converter id {converter_id!r} listed twice")
                seen.add(converter_id)
        return cls(version, tuple(converters))


@dataclass
class SyncReport:
    added: int = 0
    replaced: int = 0
    skipped: int = 0
    failed: int = 0
    failed_ids: List[str] = field(default_factory=list)

    def __str__(self):
        return f"added={self.added} replaced={self.replaced} skipped={self.skipped} failed={self.failed}"


def verify_record(record: Mapping) -> ConverterDescriptor:
    """
    Check a manifest record's digest and build its descriptor.

    Raises:
        DigestMismatch: the sha256 is missing or does not match.
        InvalidDescriptor: the record is not a valid descriptor.
    """
    if not isinstance(record, Mapping):
        raise InvalidDescriptor(f"manifest record must be an object, got {type(record).__name__}")
    declared = record.get('sha256')
    if not isinstance(declared, str):
        raise DigestMismatch(f"record {record.get('id')!r} carries no sha256")
    actual = record_digest(record)
    if declared.lower() != actual:
        raise DigestMismatch(f"record {record.get('id')!r}: sha256 {declared} != {actual}")
    return ConverterDescriptor.from_record(record)


def sync(registry_url: str, registry, fetcher, store=None) -> SyncReport:
    """
    Fetch the manifest at registry_url and register what it lists.

    Bad records are counted in the report and never stop the others. Builtin
    records naming a builtin this gateway lacks, and records whose version is
    not newer than the registered one, are skipped.

    Args:
        registry_url: manifest URL.
        registry: Registry to update (registrations are persisted).
        fetcher: crawler.Fetcher.
        store: when given, the manifest document is preserved at its URL.

    Raises:
        FetchFailed: the manifest could not be fetched.
        MalformedManifest: the document as a whole is unusable.
    """
    logger.info(f"Syncing converters from {registry_url}")
    response = fetcher.get(registry_url)
    manifest = RegistryManifest.parse(response.content)

    if store is not None:
        try:
            store.ingest_bytes(registry_url, MANIFEST_MEDIA_TYPE, response.content, source=SOURCE_FETCHED)
        except StoreError as e:
            logger.warning(f"Could not preserve manifest {registry_url}: {e}")

    report = SyncReport()
    for record in manifest.converters:
        record_id = record.get('id') if isinstance(record, Mapping) else None
        try:
            descriptor = verify_record(record)
        except (DigestMismatch, InvalidDescriptor) as e:
            logger.warning(f"Rejected manifest record from {registry_url}: {e}")
            report.failed += 1
            report.failed_ids.append(str(record_id))
            continue

        if descriptor.kind == KIND_BUILTIN and registry.builtin_validator is not None:
            try:
                registry.builtin_validator(descriptor)
            except InvalidDescriptor as e:
                logger.info(f"Skipping {descriptor.id}: {e}")
                report.skipped += 1
                continue

        try:
            outcome = registry.register(descriptor, persist=True)
        except DuplicateId as e:
            logger.debug(f"Skipping {descriptor.id}: {e}")
            report.skipped += 1
            continue
        except InvalidDescriptor as e:
            logger.warning(f"Rejected {descriptor.id} from {registry_url}: {e}")
            report.failed += 1
            report.failed_ids.append(descriptor.id)
            continue

        if outcome == 'added':
            report.added += 1
        else:
            report.replaced += 1

    logger.info(f"Sync of {registry_url}: {report}")
    return report


def sync_all(urls: Iterable[str], registry, fetcher, store=None) -> SyncReport:
    """Sync every URL, logging instead of raising per URL; returns the combined report."""
    total = SyncReport()
    for url in urls:
        try:
            report = sync(url, registry, fetcher, store)
        except MigradoError as e:
            logger.error(f"Registry sync of {url} failed: {e}")
            total.failed += 1
            total.failed_ids.append(url)
            continue
        total.added += report.added
        total.replaced += report.replaced
        total.skipped += report.skipped
        total.failed += report.failed
        total.failed_ids.extend(report.failed_ids)
    return total
