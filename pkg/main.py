#!/usr/bin/env python3
"""
Command-line entry point for the migrado web-archive gateway.

Commands: serve, ingest, negotiate, convert, verify, registry-sync, converters.
Exit status 0 on success, 1 on an operational error, 2 on a usage error.
"""

import argparse
import logging
import mimetypes
import os
import signal
import sys
import threading
from dataclasses import dataclass
from pathlib import Path

from config import Config
from converters import ConversionRequest, ConverterRunner, builtin_descriptor, check_builtin
from crawler import Fetcher
from errors import ConfigError, MalformedAccept, MalformedMediaType, MigradoError, UsageError
from gateway import Gateway
from mqtt_worker import MQTTWorker
from negotiation import ObsolescencePolicy, match_quality, parse_accept, parse_media_type
from performance_monitor import PerformanceMonitor
from registry import ConverterDescriptor, Registry
from regclient import sync, sync_all
from store import Store, canonicalize_url

logger = logging.getLogger('migrado')

REGISTRY_FILE = 'converters.json'

_shutdown = threading.Event()


def setup_logging(config: dict, stream=sys.stdout):
    """Configure logging based on config settings."""
    log_config = config.get('logging', {})
    log_file = log_config.get('file', 'logs/migrado.log')

    handlers = [logging.StreamHandler(stream)]
    if log_file:
        log_dir = os.path.dirname(log_file)
        try:
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)
            handlers.append(logging.FileHandler(log_file))
        except OSError as e:
            print(f"Warning: cannot log to {log_file} ({e}), logging to console only", file=sys.stderr)

    logging.basicConfig(
        level=getattr(logging, str(log_config.get('level', 'INFO')).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def signal_handler(signum, frame):
    """Handle shutdown signals gracefully."""
    logger.info("Shutdown signal received, cleaning up...")
    _shutdown.set()


@dataclass
class Services:
    store: Store
    registry: Registry
    runner: ConverterRunner
    monitor: PerformanceMonitor
    fetcher: Fetcher


def build_registry(config: Config) -> Registry:
    """Builtins and external converters from config, then the persisted table."""
    registry = Registry(Path(config.store_path) / REGISTRY_FILE, builtin_validator=check_builtin)
    converters_config = config.section('converters')
    try:
        for converter_id in converters_config.get('builtin', []):
            registry.register(builtin_descriptor(converter_id))
        for record in converters_config.get('external', []):
            registry.register(ConverterDescriptor.from_record(record))
    except MigradoError as e:
        raise ConfigError(f"bad converter in configuration: {e}") from e
    registry.load()
    return registry


def build_services(config: Config) -> Services:
    monitor = PerformanceMonitor()
    fetcher = Fetcher(config.data)
    store = Store(config.data, fetcher=fetcher)
    registry = build_registry(config)
    runner = ConverterRunner(config.data, monitor=monitor)
    return Services(store, registry, runner, monitor, fetcher)


def policy_from(config: Config) -> ObsolescencePolicy:
    return ObsolescencePolicy.from_types(config.obsolete_types)


def _media_type_arg(text: str):
    try:
        return parse_media_type(text)
    except MalformedMediaType as e:
        raise UsageError(str(e)) from e


# -- commands ---------------------------------------------------------------

def cmd_serve(config: Config, args) -> int:
    services = build_services(config)

    mqtt_worker = None
    if config.section('mqtt').get('enabled'):
        mqtt_worker = MQTTWorker(config.data, monitor=services.monitor)
        if mqtt_worker.start():
            logger.info("MQTT Worker started successfully")
        else:
            logger.warning("MQTT Worker failed to start - continuing without MQTT")

    if config.registry_urls:
        report = sync_all(config.registry_urls, services.registry, services.fetcher, services.store)
        logger.info(f"Registry sync at startup: {report}")
        if mqtt_worker is not None:
            mqtt_worker.publish_archive_event('sync', {
                'urls': list(config.registry_urls),
                'added': report.added,
                'replaced': report.replaced,
                'skipped': report.skipped,
                'failed': report.failed,
            })

    gateway = Gateway(config.data, services.store, services.registry, services.runner,
                      monitor=services.monitor, events=mqtt_worker)
    if not gateway.start():
        raise MigradoError(f"cannot listen on {config.listen_address}")

    print(f"serving {gateway.get_url()}", flush=True)
    logger.info(f"System ready - gateway at {gateway.get_url()} "
                f"({len(services.store)} resources, {len(services.registry.list_converters())} converters)")
    try:
        while not _shutdown.is_set() and gateway.is_running():
            _shutdown.wait(1.0)
    finally:
        gateway.cleanup()
        if mqtt_worker is not None:
            mqtt_worker.cleanup()
        services.monitor.log_performance_summary()
    return 0


def _ingest_target(item: str, base_url):
    """Split an ingest argument into (path or None, url)."""
    if item.lower().startswith(('http://', 'https://')):
        return None, item
    if '=' in item:
        path, url = item.split('=', 1)
        return Path(path), url
    if base_url:
        path = Path(item)
        return path, base_url.rstrip('/') + '/' + path.name
    raise UsageError(f"{item}: local files need --base-url or the PATH=URL form")


def cmd_ingest(config: Config, args) -> int:
    targets = [_ingest_target(item, args.base_url) for item in args.items]
    store = Store(config.data)
    for path, url in targets:
        if path is None:
            digest = store.ingest_fetch(url)
        else:
            digest = store.ingest_file(path, url)
        canonical = canonicalize_url(url)
        print(f"{digest} {canonical} {store.entries()[canonical].media_type}")
    return 0


def cmd_negotiate(config: Config, args) -> int:
    media_type = _media_type_arg(args.media_type)
    try:
        accept = parse_accept(args.accept, strict=config.strict_accept_parsing)
    except MalformedAccept as e:
        raise UsageError(f"malformed Accept header: {e}") from e
    q = match_quality(media_type, accept, policy_from(config))
    print(f"q={q} decision={'accept' if q else 'reject'}")
    return 0


def _extension_for(media_type) -> str:
    return mimetypes.guess_extension(media_type.essence) or '.bin'


def cmd_convert(config: Config, args) -> int:
    source = _media_type_arg(args.source_type)
    target = _media_type_arg(args.target_type)
    source_path = Path(args.source_file)
    try:
        body = source_path.read_bytes()
    except OSError as e:
        raise MigradoError(f"cannot read {source_path}: {e}") from e

    registry = build_registry(config)
    plan = registry.plan(source, parse_accept(str(target)))
    if plan is None:
        raise MigradoError(f"no registered converter turns {source} into {target}")
    descriptor = registry.get(plan.converter_id)

    runner = ConverterRunner(config.data, monitor=PerformanceMonitor())
    result = runner.run(descriptor, ConversionRequest(source, plan.target, body))

    output = Path(args.output) if args.output else source_path.with_suffix(_extension_for(plan.target))
    try:
        output.write_bytes(result.body)
    except OSError as e:
        raise MigradoError(f"cannot write {output}: {e}") from e
    print(output)
    for note in result.notes:
        print(f"note: {note}")
    return 0


def cmd_verify(config: Config, args) -> int:
    report = Store(config.data).verify()
    print(f"total={report.total} ok={report.ok} failed={len(report.failed)}")
    for url in report.failed:
        print(f"failed: {url}")
    return 1 if report.failed else 0


def cmd_registry_sync(config: Config, args) -> int:
    fetcher = Fetcher(config.data)
    store = Store(config.data, fetcher=fetcher)
    registry = build_registry(config)
    report = sync(args.url, registry, fetcher, store=store)
    print(report)
    for converter_id in report.failed_ids:
        print(f"failed: {converter_id}")
    return 0


def cmd_converters(config: Config, args) -> int:
    for d in build_registry(config).list_converters():
        line = f"{d.id} {d.input} -> {d.output} cost={d.cost} version={d.version} kind={d.kind}"
        if d.command:
            line += ' command=' + ' '.join(d.command)
        print(line)
    return 0


COMMANDS = {
    'serve': cmd_serve,
    'ingest': cmd_ingest,
    'negotiate': cmd_negotiate,
    'convert': cmd_convert,
    'verify': cmd_verify,
    'registry-sync': cmd_registry_sync,
    'converters': cmd_converters,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='migrado', description='Web-archive gateway with on-access format migration')
    parser.add_argument('--config', help='JSON config file (default: $MIGRADO_CONFIG or migrado_config.json)')
    parser.add_argument('--store', dest='store_path', help='store directory')
    parser.add_argument('--listen', dest='listen_address', help='host:port to serve on')
    parser.add_argument('--obsolete', action='append', metavar='TYPE/SUBTYPE',
                        help='treat a media type as obsolete (repeatable)')
    parser.add_argument('--upstream', dest='upstream_mode', action='store_const', const=True,
                        help='pass requests through to the publisher first')
    parser.add_argument('--upstream-strict', action='store_const', const=True,
                        help='answer 502 when the publisher is unreachable')
    parser.add_argument('--upstream-timeout-ms', type=int)
    parser.add_argument('--cache-bytes', type=int)
    parser.add_argument('--external-concurrency', type=int)
    parser.add_argument('--strict-accept', action='store_const', const=True,
                        help='answer 400 to malformed Accept headers')
    parser.add_argument('--permission-stub', action='store_const', const=True,
                        help='require <origin>/lockss-permission before fetching')
    parser.add_argument('--registry-url', action='append', help='converter manifest URL (repeatable)')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])

    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    sub.add_parser('serve', help='run the gateway')

    p = sub.add_parser('ingest', help='preserve files or fetched URLs')
    p.add_argument('items', nargs='+', metavar='PATH|URL|PATH=URL')
    p.add_argument('--base-url', help='URL prefix for local files')

    p = sub.add_parser('negotiate', help='print the q a media type earns under an Accept header')
    p.add_argument('media_type')
    p.add_argument('accept', nargs='?', help='Accept header value (omit for no header)')

    p = sub.add_parser('convert', help='convert a file offline through the registry')
    p.add_argument('source_file')
    p.add_argument('source_type')
    p.add_argument('target_type')
    p.add_argument('-o', '--output')

    sub.add_parser('verify', help='re-hash every preserved body')

    p = sub.add_parser('registry-sync', help='register converters from a manifest URL')
    p.add_argument('url')

    sub.add_parser('converters', help='list registered converters')
    return parser


def load_config(args) -> Config:
    config = Config(args.config)
    overrides = {
        'store.path': args.store_path,
        'gateway.listen_address': args.listen_address,
        'upstream.mode': args.upstream_mode,
        'upstream.strict': args.upstream_strict,
        'upstream.timeout_ms': args.upstream_timeout_ms,
        'cache.bytes': args.cache_bytes,
        'converters.external_concurrency': args.external_concurrency,
        'negotiation.strict_accept_parsing': args.strict_accept,
        'store.permission_stub': args.permission_stub,
        'logging.level': args.log_level,
    }
    if args.obsolete:
        overrides['negotiation.obsolete_types'] = config.obsolete_types + args.obsolete
    if args.registry_url:
        overrides['registry.urls'] = list(config.registry_urls) + args.registry_url
    config.apply_overrides(overrides)
    config.validate()
    return config


def main(argv=None) -> int:
    """Main application entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    # command output owns stdout except while serving
    setup_logging(config.data, stream=sys.stdout if args.command == 'serve' else sys.stderr)

    if args.command == 'serve':
        signal.signal(signal.SIGINT, signal_handler)
        signal.signal(signal.SIGTERM, signal_handler)

    try:
        return COMMANDS[args.command](config, args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except MigradoError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
