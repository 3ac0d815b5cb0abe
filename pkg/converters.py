"""
Format converters: the built-in reference converters and the adapter that
runs external-command converters (raw bytes on stdin, converted bytes on
stdout, exit status 0 on success).
"""

import html
import io
import logging
import subprocess
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import png
from PIL import Image

from errors import (ConversionFailed, ConverterCrashed, ConverterTimeout, EmptyOutput,
                    InvalidDescriptor, MalformedInput, SourceTargetMismatch)
from negotiation import MediaType
from registry import DEFAULT_COST, KIND_BUILTIN, KIND_EXTERNAL, ConverterDescriptor, is_identity_id

logger = logging.getLogger(__name__)

GIF = MediaType('image', 'gif')
PNG = MediaType('image', 'png')
TEXT = MediaType('text', 'plain')
HTML = MediaType('text', 'html')

# Fixed zlib level; pypng writes filter type 0 on every scanline.
PNG_COMPRESSION_LEVEL = 9
NOTE_ANIMATED = 'animated-gif: first frame only'
DEFAULT_EXTERNAL_TIMEOUT = 30.0
DEFAULT_EXTERNAL_CONCURRENCY = 4

HTML_TEMPLATE = (
    '<!DOCTYPE html>\n'
    '<html>\n'
    '<head><meta charset="utf-8"><title></title></head>\n'
    '<body><pre>{text}</pre></body>\n'
    '</html>\n'
)


@dataclass(frozen=True)
class ConversionRequest:
    source: MediaType
    target: MediaType
    body: bytes = field(repr=False)


@dataclass(frozen=True)
class ConversionResult:
    body: bytes = field(repr=False)
    media_type: MediaType = None
    notes: Tuple[str, ...] = ()


def _require(req: ConversionRequest, source: MediaType, target: MediaType) -> None:
    if req.source.without_params() != source or req.target.without_params() != target:
        raise SourceTargetMismatch(f"expected {source} -> {target}, got {req.source} -> {req.target}")


def convert_identity(req: ConversionRequest) -> ConversionResult:
    if req.source.without_params() != req.target.without_params():
        raise SourceTargetMismatch(f"identity cannot turn {req.source} into {req.target}")
    return ConversionResult(req.body, req.target)


def convert_gif_to_png(req: ConversionRequest) -> ConversionResult:
    """
    Decode the first GIF frame to RGBA (transparency honoured, interlacing
    undone by the decoder) and re-encode it as PNG.

    Raises:
        MalformedInput: the body is not a decodable GIF87a/GIF89a stream.
        ConversionFailed: the PNG encoder failed.
    """
    _require(req, GIF, PNG)
    if not req.body.startswith((b'GIF87a', b'GIF89a')):
        raise MalformedInput('not a GIF87a/GIF89a stream')

    notes = []
    try:
        with Image.open(io.BytesIO(req.body)) as img:
            if img.format != 'GIF':
                raise MalformedInput(f"decoder identified {img.format}, not GIF")
            if getattr(img, 'n_frames', 1) > 1:
                notes.append(NOTE_ANIMATED)
            img.seek(0)
            rgba = img.convert('RGBA')
    except MalformedInput:
        raise
    except (OSError, ValueError, SyntaxError, EOFError, Image.DecompressionBombError) as e:
        raise MalformedInput(f"cannot decode GIF: {e}") from e

    pixels = np.asarray(rgba, dtype=np.uint8)
    height, width = pixels.shape[:2]
    rows = [row.tobytes() for row in pixels.reshape(height, width * 4)]
    try:
        writer = png.Writer(width=width, height=height, greyscale=False, alpha=True,
                            bitdepth=8, compression=PNG_COMPRESSION_LEVEL)
        out = io.BytesIO()
        writer.write(out, rows)
    except (png.Error, ValueError) as e:
        raise ConversionFailed(f"PNG encoding failed: {e}") from e
    return ConversionResult(out.getvalue(), req.target, tuple(notes))


def convert_text_to_html(req: ConversionRequest) -> ConversionResult:
    _require(req, TEXT, HTML)
    text = req.body.decode('utf-8', errors='replace')
    document = HTML_TEMPLATE.format(text=html.escape(text, quote=False))
    return ConversionResult(document.encode('utf-8'), req.target)


def convert_external(descriptor: ConverterDescriptor, req: ConversionRequest,
                     timeout: float = DEFAULT_EXTERNAL_TIMEOUT) -> ConversionResult:
    """
    Run an external-command converter.

    Raises:
        ConverterCrashed: the command could not start or exited nonzero.
        ConverterTimeout: the command outlived timeout seconds (it is killed).
        EmptyOutput: the command succeeded but wrote nothing.
    """
    if descriptor.kind != KIND_EXTERNAL:
        raise ConversionFailed(f"{descriptor.id} is not an external-command converter")
    command = list(descriptor.command)
    try:
        completed = subprocess.run(command, input=req.body, stdout=subprocess.PIPE,
                                   stderr=subprocess.PIPE, timeout=timeout, check=False)
    except subprocess.TimeoutExpired as e:
        raise ConverterTimeout(f"{descriptor.id} exceeded {timeout:g}s") from e
    except OSError as e:
        raise ConverterCrashed(f"{descriptor.id} could not start {command[0]!r}: {e}") from e

    stderr = completed.stderr.decode('utf-8', errors='replace').strip()
    if completed.returncode != 0:
        tail = stderr.splitlines()[-1] if stderr else 'no diagnostics'
        raise ConverterCrashed(f"{descriptor.id} exited with status {completed.returncode}: {tail}")
    if stderr:
        logger.debug(f"{descriptor.id} stderr: {stderr}")
    if not completed.stdout:
        raise EmptyOutput(f"{descriptor.id} produced no output")
    return ConversionResult(completed.stdout, descriptor.output)


BUILTINS: Dict[str, Tuple[MediaType, MediaType, Callable[[ConversionRequest], ConversionResult]]] = {
    'gif2png': (GIF, PNG, convert_gif_to_png),
    'text2html': (TEXT, HTML, convert_text_to_html),
}


def builtin_descriptor(converter_id: str, media_type: Optional[MediaType] = None) -> ConverterDescriptor:
    """Descriptor for a named builtin; identity converters need the media type they keep."""
    if is_identity_id(converter_id):
        if media_type is None:
            raise InvalidDescriptor(f"{converter_id} needs a media type")
        return ConverterDescriptor(converter_id, media_type, media_type, cost=0)
    if converter_id not in BUILTINS:
        raise InvalidDescriptor(f"no builtin converter named {converter_id!r}")
    source, target, _ = BUILTINS[converter_id]
    return ConverterDescriptor(converter_id, source, target, cost=DEFAULT_COST, kind=KIND_BUILTIN)


def check_builtin(descriptor: ConverterDescriptor) -> None:
    """Reject builtin-kind descriptors that name no local builtin or misstate its types."""
    if is_identity_id(descriptor.id):
        return
    known = BUILTINS.get(descriptor.id)
    if known is None:
        raise InvalidDescriptor(f"no builtin converter named {descriptor.id!r}")
    source, target, _ = known
    if descriptor.input.without_params() != source or descriptor.output.without_params() != target:
        raise InvalidDescriptor(
            f"builtin {descriptor.id} converts {source} -> {target}, "
            f"not {descriptor.input} -> {descriptor.output}")


def resolve_builtin(converter_id: str) -> Callable[[ConversionRequest], ConversionResult]:
    if is_identity_id(converter_id):
        return convert_identity
    try:
        return BUILTINS[converter_id][2]
    except KeyError:
        raise ConversionFailed(f"no builtin converter named {converter_id!r}") from None


class ConverterRunner:
    """
    Executes converters for the gateway and the CLI.

    External commands share a bounded pool of slots so a burst of requests
    cannot fork an unbounded number of processes.
    """

    def __init__(self, config: dict, monitor=None):
        """
        Args:
            config: Dictionary with an optional 'converters' section containing
                'external_concurrency' and 'external_timeout'.
            monitor: PerformanceMonitor receiving one record per invocation.
        """
        converters_config = config.get('converters', {})
        self.external_timeout = float(converters_config.get('external_timeout', DEFAULT_EXTERNAL_TIMEOUT))
        self.external_concurrency = max(1, int(converters_config.get(
            'external_concurrency', DEFAULT_EXTERNAL_CONCURRENCY)))
        self._external_slots = threading.BoundedSemaphore(self.external_concurrency)
        self.monitor = monitor

    def run(self, descriptor: ConverterDescriptor, request: ConversionRequest) -> ConversionResult:
        start = time.perf_counter()
        ok = False
        try:
            if descriptor.kind == KIND_EXTERNAL:
                with self._external_slots:
                    result = convert_external(descriptor, request, timeout=self.external_timeout)
            else:
                result = resolve_builtin(descriptor.id)(request)
            if result.media_type != descriptor.output:
                raise ConversionFailed(
                    f"{descriptor.id} produced {result.media_type}, declared {descriptor.output}")
            ok = True
        finally:
            duration = time.perf_counter() - start
            if self.monitor is not None:
                self.monitor.track_conversion(descriptor.id, duration, ok)

        logger.info(f"Converted {request.source} -> {result.media_type} with {descriptor.id} "
                    f"({len(request.body)} -> {len(result.body)} bytes, {duration * 1000:.1f}ms)")
        for note in result.notes:
            logger.info(f"{descriptor.id}: {note}")
        return result
