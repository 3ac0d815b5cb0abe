"""
Table of registered format converters and the matching process that pairs
a stored format with an acceptable output format.
"""

import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Callable, List, Mapping, Optional, Tuple, Union

from errors import DuplicateId, InvalidDescriptor, MalformedMediaType
from negotiation import (EMPTY_POLICY, AcceptHeader, MediaType, ObsolescencePolicy, QValue,
                         match_quality, parse_media_type)
from store import write_atomic

logger = logging.getLogger(__name__)

KIND_BUILTIN = 'builtin'
KIND_EXTERNAL = 'external-command'
KINDS = (KIND_BUILTIN, KIND_EXTERNAL)
DEFAULT_COST = 100
DEFAULT_VERSION = '1'
IDENTITY_ID = 'identity'

DESCRIPTOR_FIELDS = ('id', 'input', 'output', 'cost', 'version', 'kind', 'command')


def is_identity_id(converter_id: str) -> bool:
    return converter_id == IDENTITY_ID or converter_id.startswith(IDENTITY_ID + '-')


def version_key(version: str) -> Tuple:
    """Order dotted versions segment by segment; numeric segments sort before text ones."""
    key = []
    for segment in str(version).split('.'):
        if segment.isdigit():
            key.append((0, int(segment), ''))
        else:
            key.append((1, 0, segment))
    return tuple(key)


@dataclass(frozen=True)
class ConverterDescriptor:
    id: str
    input: MediaType
    output: MediaType
    cost: int = DEFAULT_COST
    version: str = DEFAULT_VERSION
    kind: str = KIND_BUILTIN
    command: Tuple[str, ...] = ()

    @property
    def is_identity(self) -> bool:
        return is_identity_id(self.id)

    def validate(self) -> None:
        """Raise InvalidDescriptor unless the descriptor is self-consistent."""
        if not isinstance(self.id, str) or not self.id or any(c.isspace() for c in self.id):
            raise InvalidDescriptor(f"converter id must be a non-empty word: {self.id!r}")
        if not isinstance(self.input, MediaType) or not isinstance(self.output, MediaType):
            raise InvalidDescriptor(f"{self.id}: input and output must be media types")
        if isinstance(self.cost, bool) or not isinstance(self.cost, int) or self.cost < 0:
            raise InvalidDescriptor(f"{self.id}: cost must be a non-negative integer, got {self.cost!r}")
        if not isinstance(self.version, str) or not self.version:
            raise InvalidDescriptor(f"{self.id}: version must be a non-empty string")
        if self.kind not in KINDS:
            raise InvalidDescriptor(f"{self.id}: unknown kind {self.kind!r}")
        if self.kind == KIND_EXTERNAL:
            if not self.command or not all(isinstance(part, str) and part for part in self.command):
                raise InvalidDescriptor(f"{self.id}: external-command converters need a command")
        elif self.command:
            raise InvalidDescriptor(f"{self.id}: builtin converters take no command")
        same = self.input.without_params() == self.output.without_params()
        if self.is_identity and not same:
            raise InvalidDescriptor(f"{self.id}: identity converters must keep the media type")
        if same and not self.is_identity:
            raise InvalidDescriptor(f"{self.id}: input and output are both {self.input}")

    def to_record(self) -> dict:
        record = {
            'id': self.id,
            'input': str(self.input),
            'output': str(self.output),
            'cost': self.cost,
            'version': self.version,
            'kind': self.kind,
        }
        if self.command:
            record['command'] = list(self.command)
        return record

    @classmethod
    def from_record(cls, record: Mapping) -> 'ConverterDescriptor':
        """Build and validate a descriptor from its JSON record."""
        if not isinstance(record, Mapping):
            raise InvalidDescriptor(f"descriptor record must be an object, got {type(record).__name__}")
        unknown = set(record) - set(DESCRIPTOR_FIELDS) - {'sha256'}
        if unknown:
            raise InvalidDescriptor(f"unknown descriptor fields: {sorted(unknown)}")
        try:
            command = record.get('command') or ()
            if isinstance(command, str):
                raise InvalidDescriptor("command must be a list of arguments")
            descriptor = cls(
                id=record['id'],
                input=parse_media_type(record['input']),
                output=parse_media_type(record['output']),
                cost=record.get('cost', DEFAULT_COST),
                version=str(record.get('version', DEFAULT_VERSION)),
                kind=record.get('kind', KIND_BUILTIN),
                command=tuple(command),
            )
        except KeyError as e:
            raise InvalidDescriptor(f"descriptor record missing {e}") from e
        except (MalformedMediaType, TypeError) as e:
            raise InvalidDescriptor(f"bad descriptor record {record.get('id')!r}: {e}") from e
        descriptor.validate()
        return descriptor


@dataclass(frozen=True)
class ConversionPlan:
    converter_id: str
    source: MediaType
    target: MediaType
    client_q: QValue


class RegistrySnapshot:
    """Immutable view of the converter table; all matching runs against one of these."""

    def __init__(self, table: Mapping[str, ConverterDescriptor]):
        self._table = MappingProxyType(dict(table))

    def get(self, converter_id: str) -> Optional[ConverterDescriptor]:
        return self._table.get(converter_id)

    def __contains__(self, converter_id: str) -> bool:
        return converter_id in self._table

    def __len__(self):
        return len(self._table)

    def __eq__(self, other):
        if not isinstance(other, RegistrySnapshot):
            return NotImplemented
        return dict(self._table) == dict(other._table)

    def list_converters(self) -> List[ConverterDescriptor]:
        return [self._table[k] for k in sorted(self._table)]

    def candidates_for(self, source: MediaType) -> List[ConverterDescriptor]:
        essence = source.without_params()
        return [d for d in self.list_converters() if d.input.without_params() == essence]

    def reachable_outputs(self, source: MediaType) -> List[MediaType]:
        return [d.output for d in self.candidates_for(source)]

    def plan(self, source: MediaType, accept: AcceptHeader,
             policy: ObsolescencePolicy = EMPTY_POLICY) -> Optional[ConversionPlan]:
        """
        Pick the converter for source whose output the client accepts best.

        Ranking is (client q descending, cost ascending, id ascending), so the
        result never depends on registration order. Outputs with q=0 are never
        chosen.
        """
        best = None
        best_key = None
        best_q = None
        for descriptor in self.candidates_for(source):
            q = match_quality(descriptor.output, accept, policy)
            if not q:
                continue
            key = (-q.millis, descriptor.cost, descriptor.id)
            if best_key is None or key < best_key:
                best, best_key, best_q = descriptor, key, q
        if best is None:
            return None
        return ConversionPlan(best.id, source, best.output, best_q)


class Registry:
    """
    Registered converters. Readers take lock-free snapshots; register and
    unregister serialize through a single writer lock and publish a new
    snapshot when done.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None,
                 builtin_validator: Optional[Callable[[ConverterDescriptor], None]] = None):
        """
        Args:
            path: JSON file persisting registrations made with persist=True.
            builtin_validator: called with builtin-kind descriptors; raises
                InvalidDescriptor when no such builtin exists locally.
        """
        self.path = Path(path) if path else None
        self.builtin_validator = builtin_validator
        self._lock = threading.Lock()
        self._snapshot = RegistrySnapshot({})
        self._persistent_ids = set()

    def snapshot(self) -> RegistrySnapshot:
        return self._snapshot

    def validate(self, descriptor: ConverterDescriptor) -> None:
        descriptor.validate()
        if descriptor.kind == KIND_BUILTIN and self.builtin_validator is not None:
            self.builtin_validator(descriptor)

    def register(self, descriptor: ConverterDescriptor, persist: bool = False) -> str:
        """
        Add a converter, or replace an existing id with a newer version.

        Returns:
            'added' or 'replaced'.

        Raises:
            InvalidDescriptor: the descriptor breaks an invariant.
            DuplicateId: the id exists with the same or a newer version.
        """
        self.validate(descriptor)
        with self._lock:
            was_persistent = descriptor.id in self._persistent_ids
            outcome = self._install_locked(descriptor, persist)
            if persist or was_persistent:
                self._save_locked()
        self._log_registered(descriptor, outcome)
        return outcome

    def _install_locked(self, descriptor: ConverterDescriptor, persist: bool) -> str:
        table = dict(self._snapshot._table)
        current = table.get(descriptor.id)
        if current is not None and version_key(descriptor.version) <= version_key(current.version):
            raise DuplicateId(
                f"{descriptor.id} already registered at version {current.version}")
        table[descriptor.id] = descriptor
        self._snapshot = RegistrySnapshot(table)
        if persist:
            self._persistent_ids.add(descriptor.id)
        else:
            self._persistent_ids.discard(descriptor.id)
        return 'added' if current is None else 'replaced'

    @staticmethod
    def _log_registered(descriptor: ConverterDescriptor, outcome: str) -> None:
        logger.info(f"Converter {descriptor.id} {outcome}: {descriptor.input} -> {descriptor.output} "
                    f"(v{descriptor.version}, cost {descriptor.cost}, {descriptor.kind})")

    def unregister(self, converter_id: str) -> bool:
        with self._lock:
            if converter_id not in self._snapshot:
                return False
            table = dict(self._snapshot._table)
            del table[converter_id]
            self._snapshot = RegistrySnapshot(table)
            if converter_id in self._persistent_ids:
                self._persistent_ids.discard(converter_id)
                self._save_locked()
        logger.info(f"Converter {converter_id} unregistered")
        return True

    def get(self, converter_id: str) -> Optional[ConverterDescriptor]:
        return self._snapshot.get(converter_id)

    def list_converters(self) -> List[ConverterDescriptor]:
        return self._snapshot.list_converters()

    def plan(self, source: MediaType, accept: AcceptHeader,
             policy: ObsolescencePolicy = EMPTY_POLICY) -> Optional[ConversionPlan]:
        return self._snapshot.plan(source, accept, policy)

    # -- persistence --------------------------------------------------------

    def _save_locked(self) -> None:
        if self.path is None:
            return
        table = self._snapshot._table
        records = [table[k].to_record() for k in sorted(self._persistent_ids) if k in table]
        data = json.dumps({'version': 1, 'converters': records}, indent=2, ensure_ascii=False)
        write_atomic(self.path, (data + '\n').encode('utf-8'))

    def load(self) -> int:
        """Register the persisted table, writing it back once; bad or stale records are logged and skipped."""
        if self.path is None or not self.path.exists():
            return 0
        try:
            with open(self.path, 'r', encoding='utf-8') as f:
                document = json.load(f)
        except (OSError, ValueError) as e:
            logger.error(f"Cannot read converter table {self.path}: {e}")
            return 0
        installed = []
        with self._lock:
            for record in document.get('converters', []):
                try:
                    descriptor = ConverterDescriptor.from_record(record)
                    self.validate(descriptor)
                    installed.append((descriptor, self._install_locked(descriptor, persist=True)))
                except (InvalidDescriptor, DuplicateId) as e:
                    logger.warning(f"Ignoring persisted converter: {e}")
            if installed:
                self._save_locked()
        for descriptor, outcome in installed:
            self._log_registered(descriptor, outcome)
        logger.info(f"Loaded {len(installed)} persisted converters from {self.path}")
        return len(installed)
