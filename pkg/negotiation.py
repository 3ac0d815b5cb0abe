"""
HTTP format negotiation for the archive gateway.

Parses media types and Accept headers and decides which quality value a
stored format earns under a client's Accept header and the server's
obsolescence policy. Everything here is a pure function over immutable
values, so request handlers can share it freely.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import FrozenSet, Iterable, List, Optional, Tuple, Type, Union

from errors import MalformedAccept, MalformedMediaType, MalformedQValue

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")
_QVALUE_RE = re.compile(r"^(?:0(?:\.[0-9]{0,3})?|1(?:\.0{0,3})?)$")

Params = Tuple[Tuple[str, str], ...]


def _is_token(text: str) -> bool:
    return bool(_TOKEN_RE.match(text))


def _quote(value: str) -> str:
    if _is_token(value):
        return value
    escaped = value.replace('\\', '\\\\').replace('"', '\\"')
    return f'"{escaped}"'


def _split_unquoted(text: str, sep: str) -> List[str]:
    """Split on sep, ignoring separators inside quoted strings."""
    parts = []
    buf = []
    in_quotes = False
    escaped = False
    for ch in text:
        if in_quotes:
            buf.append(ch)
            if escaped:
                escaped = False
            elif ch == '\\':
                escaped = True
            elif ch == '"':
                in_quotes = False
        elif ch == '"':
            in_quotes = True
            buf.append(ch)
        elif ch == sep:
            parts.append(''.join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append(''.join(buf))
    return parts


def _unquote(value: str, error: Type[Exception]) -> str:
    chars = []
    i = 1
    while i < len(value):
        ch = value[i]
        if ch == '\\':
            if i + 1 >= len(value):
                break
            chars.append(value[i + 1])
            i += 2
            continue
        if ch == '"':
            if i != len(value) - 1:
                raise error(f"trailing characters after quoted string: {value!r}")
            return ''.join(chars)
        chars.append(ch)
        i += 1
    raise error(f"unterminated quoted string: {value!r}")


def _parse_param(segment: str, error: Type[Exception]) -> Tuple[str, str]:
    name, sep, value = segment.partition('=')
    name = name.strip()
    value = value.strip()
    if not sep or not _is_token(name):
        raise error(f"bad parameter: {segment.strip()!r}")
    if value.startswith('"'):
        value = _unquote(value, error)
    elif not _is_token(value):
        raise error(f"bad parameter value: {segment.strip()!r}")
    return name.lower(), value


def _split_type(text: str, error: Type[Exception]) -> Tuple[str, str]:
    primary, slash, sub = text.strip().partition('/')
    if not slash:
        raise error(f"missing '/' in {text.strip()!r}")
    primary = primary.strip()
    sub = sub.strip()
    if not primary or not sub:
        raise error(f"empty type or subtype in {text.strip()!r}")
    if not _is_token(primary) or not _is_token(sub):
        raise error(f"illegal characters in {text.strip()!r}")
    return primary.lower(), sub.lower()


@dataclass(frozen=True, eq=False)
class MediaType:
    """A concrete ``type/subtype`` with ordered parameters (never a wildcard)."""

    primary: str
    sub: str
    params: Params = ()

    def __post_init__(self):
        primary = (self.primary or '').lower()
        sub = (self.sub or '').lower()
        if not primary or not sub or not _is_token(primary) or not _is_token(sub):
            raise MalformedMediaType(f"invalid media type {self.primary!r}/{self.sub!r}")
        if primary == '*' or sub == '*':
            raise MalformedMediaType(f"wildcards are not media types: {primary}/{sub}")
        params = tuple((str(k).lower(), str(v)) for k, v in self.params if str(k).lower() != 'q')
        object.__setattr__(self, 'primary', primary)
        object.__setattr__(self, 'sub', sub)
        object.__setattr__(self, 'params', params)

    @property
    def essence(self) -> str:
        return f"{self.primary}/{self.sub}"

    def without_params(self) -> 'MediaType':
        return MediaType(self.primary, self.sub)

    def _key(self):
        return self.primary, self.sub, tuple(sorted(self.params))

    def __eq__(self, other):
        if not isinstance(other, MediaType):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __str__(self):
        return self.essence + ''.join(f"; {k}={_quote(v)}" for k, v in self.params)

    def __repr__(self):
        return f"MediaType({str(self)!r})"


@dataclass(frozen=True, order=True)
class QValue:
    """Quality factor in [0, 1], held exactly as thousandths."""

    millis: int

    def __post_init__(self):
        if not isinstance(self.millis, int) or not 0 <= self.millis <= 1000:
            raise MalformedQValue(f"q out of range: {self.millis}/1000")

    @classmethod
    def parse(cls, text: str) -> 'QValue':
        text = text.strip()
        if not _QVALUE_RE.match(text):
            raise MalformedQValue(f"invalid q-value {text!r}")
        whole, _, frac = text.partition('.')
        return cls(int(whole) * 1000 + int((frac + '000')[:3]))

    @property
    def value(self) -> float:
        return self.millis / 1000

    def __float__(self):
        return self.value

    def __bool__(self):
        return self.millis > 0

    def __str__(self):
        if self.millis == 1000:
            return '1'
        if self.millis == 0:
            return '0'
        return '0.' + f"{self.millis:03d}".rstrip('0')


QValue.ONE = QValue(1000)
QValue.ZERO = QValue(0)


class RangeKind(IntEnum):
    ANY = 0
    TYPE_ONLY = 1
    EXACT = 2


@dataclass(frozen=True)
class MediaRange:
    """One Accept entry: ``*/*``, ``type/*`` or an exact media type, with q."""

    kind: RangeKind
    primary: Optional[str] = None
    media_type: Optional[MediaType] = None
    q: QValue = field(default_factory=lambda: QValue.ONE)
    params: Params = ()

    @classmethod
    def any(cls, q: QValue = None, params: Params = ()) -> 'MediaRange':
        return cls(RangeKind.ANY, q=QValue.ONE if q is None else q, params=tuple(params))

    @classmethod
    def type_only(cls, primary: str, q: QValue = None, params: Params = ()) -> 'MediaRange':
        return cls(RangeKind.TYPE_ONLY, primary=primary.lower(), q=QValue.ONE if q is None else q,
                   params=tuple(params))

    @classmethod
    def exact(cls, media_type: MediaType, q: QValue = None) -> 'MediaRange':
        return cls(RangeKind.EXACT, primary=media_type.primary, media_type=media_type,
                   q=QValue.ONE if q is None else q, params=media_type.params)

    @property
    def specificity(self) -> int:
        if self.kind is RangeKind.EXACT and self.params:
            return 3
        return int(self.kind)

    def matches(self, mt: MediaType) -> bool:
        if self.kind is RangeKind.EXACT:
            if (self.media_type.primary, self.media_type.sub) != (mt.primary, mt.sub):
                return False
        elif self.kind is RangeKind.TYPE_ONLY:
            if self.primary != mt.primary:
                return False
        return all(param in mt.params for param in self.params)

    def __str__(self):
        if self.kind is RangeKind.EXACT:
            text = str(self.media_type)
        else:
            pattern = '*/*' if self.kind is RangeKind.ANY else f"{self.primary}/*"
            text = pattern + ''.join(f"; {k}={_quote(v)}" for k, v in self.params)
        if self.q != QValue.ONE:
            text += f"; q={self.q}"
        return text


@dataclass(frozen=True)
class AcceptHeader:
    """Media ranges in source order; ``present`` is False when the header was missing."""

    ranges: Tuple[MediaRange, ...] = ()
    present: bool = True

    @classmethod
    def absent(cls) -> 'AcceptHeader':
        return cls((), False)

    @property
    def is_absent(self) -> bool:
        return not self.present

    def __len__(self):
        return len(self.ranges)

    def __str__(self):
        return ', '.join(str(r) for r in self.ranges)


@dataclass(frozen=True)
class ObsolescencePolicy:
    """Media types the server refuses to match against wildcard ranges."""

    obsolete: FrozenSet[MediaType] = frozenset()

    @classmethod
    def from_types(cls, types: Iterable[Union[str, MediaType]]) -> 'ObsolescencePolicy':
        parsed = set()
        for item in types:
            mt = item if isinstance(item, MediaType) else parse_media_type(item)
            parsed.add(mt.without_params())
        return cls(frozenset(parsed))

    def is_obsolete(self, mt: MediaType) -> bool:
        return mt.without_params() in self.obsolete

    def __bool__(self):
        return bool(self.obsolete)


EMPTY_POLICY = ObsolescencePolicy()


def parse_media_type(text: str) -> MediaType:
    """
    Parse a Content-Type style value into a canonical MediaType.

    Raises:
        MalformedMediaType: missing slash, empty token, illegal characters
            or a wildcard.
    """
    if text is None or not text.strip():
        raise MalformedMediaType("empty media type")
    head, *segments = _split_unquoted(text, ';')
    primary, sub = _split_type(head, MalformedMediaType)
    params = []
    for segment in segments:
        if not segment.strip():
            continue
        name, value = _parse_param(segment, MalformedMediaType)
        if name != 'q':
            params.append((name, value))
    return MediaType(primary, sub, tuple(params))


def parse_media_range(text: str) -> MediaRange:
    """Parse one Accept list element. Parameters after ``q`` are accept-extensions and ignored."""
    head, *segments = _split_unquoted(text, ';')
    primary, sub = _split_type(head, MalformedAccept)
    params = []
    q = QValue.ONE
    seen_q = False
    for segment in segments:
        if not segment.strip():
            continue
        name, value = _parse_param(segment, MalformedAccept)
        if seen_q:
            continue
        if name == 'q':
            q = QValue.parse(value)
            seen_q = True
            continue
        params.append((name, value))

    if primary == '*':
        if sub != '*':
            raise MalformedAccept(f"'*/subtype' is not a valid range: {head.strip()!r}")
        return MediaRange.any(q, tuple(params))
    if sub == '*':
        return MediaRange.type_only(primary, q, tuple(params))
    return MediaRange.exact(MediaType(primary, sub, tuple(params)), q)


def parse_accept(text: Optional[str], strict: bool = False) -> AcceptHeader:
    """
    Parse a raw Accept header value.

    Args:
        text: header value, or None when the request carried no Accept header.
        strict: reject the whole header on the first malformed range instead
            of dropping that range.

    Returns:
        AcceptHeader with ranges in source order (absent when text is None).

    Raises:
        MalformedAccept: only in strict mode.
    """
    if text is None:
        return AcceptHeader.absent()

    ranges = []
    for part in _split_unquoted(text, ','):
        if not part.strip():
            continue
        try:
            ranges.append(parse_media_range(part))
        except MalformedAccept as e:
            if strict:
                raise
            logger.debug(f"Dropping malformed Accept range {part.strip()!r}: {e}")
    return AcceptHeader(tuple(ranges))


def match_quality(mt: MediaType, accept: AcceptHeader,
                  policy: ObsolescencePolicy = EMPTY_POLICY) -> QValue:
    """
    Quality a media type earns under an Accept header and obsolescence policy.

    The most specific matching range decides, first in source order on ties.
    An exact range naming the type itself (same parameters) with q=0 rejects
    it outright; any other q=0 range only counts if it is the most specific
    match. Obsolete types only ever match exact ranges, so a missing header
    or bare wildcards give 0.
    """
    obsolete = policy.is_obsolete(mt)
    if accept.is_absent:
        return QValue.ZERO if obsolete else QValue.ONE

    best = None
    for rng in accept.ranges:
        if obsolete and rng.kind is not RangeKind.EXACT:
            continue
        if not rng.matches(mt):
            continue
        if rng.kind is RangeKind.EXACT and not rng.q and set(rng.params) == set(mt.params):
            return QValue.ZERO
        if best is None or rng.specificity > best.specificity:
            best = rng
    return best.q if best is not None else QValue.ZERO


def is_acceptable(mt: MediaType, accept: AcceptHeader,
                  policy: ObsolescencePolicy = EMPTY_POLICY) -> bool:
    return bool(match_quality(mt, accept, policy))
