"""
Dissemination gateway: serves preserved content at its original URL,
migrating it on access when the client no longer accepts the stored format.
"""

import logging
import time
from dataclasses import dataclass
from enum import Enum
from threading import Thread
from typing import List, Optional, Tuple

import requests
from flask import Flask, Response, g, jsonify, request
from werkzeug.exceptions import HTTPException
from werkzeug.serving import make_server

from cache import CacheKey, ConversionCache
from config import split_listen_address
from converters import ConversionRequest
from errors import ConversionError, IntegrityFailure, MalformedAccept, UpstreamFailure
from negotiation import (EMPTY_POLICY, AcceptHeader, MediaType, ObsolescencePolicy,
                         match_quality, parse_accept)
from registry import ConversionPlan, RegistrySnapshot
from store import PreservedResource

logger = logging.getLogger(__name__)

VERSION = '1.0.0'
RECENT_CACHE_KEYS = 20
UPSTREAM_CHUNK = 64 * 1024

# RFC 7230 hop-by-hop headers
HOP_BY_HOP = frozenset((
    'connection', 'keep-alive', 'proxy-authenticate', 'proxy-authorization',
    'te', 'trailer', 'transfer-encoding', 'upgrade',
))


class Decision(Enum):
    SERVE_ORIGINAL = 'serve-original'
    SERVE_CONVERTED = 'serve-converted'
    NOT_ACCEPTABLE = 'not-acceptable'


@dataclass(frozen=True)
class NegotiationOutcome:
    decision: Decision
    plan: Optional[ConversionPlan] = None
    available: Tuple[MediaType, ...] = ()


def _snapshot_of(registry) -> RegistrySnapshot:
    return registry.snapshot() if hasattr(registry, 'snapshot') else registry


def available_types(original: MediaType, snapshot: RegistrySnapshot) -> List[MediaType]:
    """The original plus every output a registered converter can reach, by essence, sorted."""
    found = {original.without_params()}
    found.update(mt.without_params() for mt in snapshot.reachable_outputs(original))
    return sorted(found, key=str)


def decide(resource: PreservedResource, accept: AcceptHeader,
           policy: ObsolescencePolicy = EMPTY_POLICY, registry=None) -> NegotiationOutcome:
    """
    Choose between the stored bytes, a conversion, and 406.

    The original wins whenever the client accepts it at all, even if a
    conversion target would score a higher q.
    """
    if match_quality(resource.media_type, accept, policy):
        return NegotiationOutcome(Decision.SERVE_ORIGINAL)

    snapshot = _snapshot_of(registry) if registry is not None else RegistrySnapshot({})
    plan = snapshot.plan(resource.media_type, accept, policy)
    if plan is not None:
        return NegotiationOutcome(Decision.SERVE_CONVERTED, plan=plan)
    return NegotiationOutcome(Decision.NOT_ACCEPTABLE,
                              available=tuple(available_types(resource.media_type, snapshot)))


def _plain(text: str, status: int) -> Response:
    return Response(text if text.endswith('\n') else text + '\n', status,
                    content_type='text/plain; charset=utf-8')


class Gateway:
    """
    Flask application answering GET/HEAD for any URL from the store.

    Works both as a forward-proxy target (absolute request URIs) and as a
    direct origin (Host header plus path). Operator endpoints live under the
    admin prefix.
    """

    def __init__(self, config: dict, store, registry, runner,
                 cache: Optional[ConversionCache] = None, monitor=None, events=None,
                 upstream_session: Optional[requests.Session] = None):
        """
        Args:
            config: merged configuration dictionary ('gateway', 'negotiation',
                'upstream' and 'cache' sections are read).
            store: Store serving preserved resources.
            registry: Registry consulted through snapshots.
            runner: ConverterRunner executing plans.
            cache: conversion cache; built from 'cache.bytes' when omitted.
            monitor: PerformanceMonitor for request metrics.
            events: optional MQTTWorker receiving archive events.
            upstream_session: requests session for pass-through (tests pass a Mock).
        """
        self.app = Flask(__name__)
        self.config = config
        self.store = store
        self.registry = registry
        self.runner = runner
        self.monitor = monitor
        self.events = events

        gateway_config = config.get('gateway', {})
        self.host, self.port = split_listen_address(gateway_config.get('listen_address', '127.0.0.1:8080'))
        self.admin_prefix = '/' + gateway_config.get('admin_prefix', '/_migrado').strip('/')

        negotiation_config = config.get('negotiation', {})
        self.policy = ObsolescencePolicy.from_types(negotiation_config.get('obsolete_types', []))
        self.strict_accept = bool(negotiation_config.get('strict_accept_parsing', False))

        upstream_config = config.get('upstream', {})
        self.upstream_mode = bool(upstream_config.get('mode', False))
        self.upstream_timeout = float(upstream_config.get('timeout_ms', 2000)) / 1000.0
        self.upstream_strict = bool(upstream_config.get('strict', False))
        self.upstream_session = upstream_session
        if self.upstream_mode and self.upstream_session is None:
            self.upstream_session = requests.Session()

        self.decide = monitor.profile_function(decide) if monitor is not None else decide

        self.cache = cache if cache is not None else ConversionCache(
            int(config.get('cache', {}).get('bytes', 256 * 1024 * 1024)), monitor=monitor)

        self.server = None
        self.thread = None
        self.running = False

        self._setup_routes()
        self._setup_middleware()
        self._setup_error_handlers()

        logger.info(f"Gateway initialized: http://{self.host}:{self.port} "
                    f"(obsolete={sorted(str(t) for t in self.policy.obsolete)}, upstream={self.upstream_mode})")

    def _setup_routes(self):
        """Admin endpoints first; everything else is a preserved URL."""
        prefix = self.admin_prefix
        self.app.add_url_rule(f'{prefix}/health', 'health', self.health_check)
        self.app.add_url_rule(f'{prefix}/converters', 'converters', self.api_converters)
        self.app.add_url_rule(f'{prefix}/status', 'status', self.api_status)
        # no automatic OPTIONS: the archive answers GET and HEAD only
        self.app.add_url_rule('/', 'resource', self.handle_get, defaults={'path': ''},
                              methods=['GET', 'HEAD'], provide_automatic_options=False)
        self.app.add_url_rule('/<path:path>', 'resource', self.handle_get,
                              methods=['GET', 'HEAD'], provide_automatic_options=False)

    def _setup_middleware(self):
        @self.app.before_request
        def start_timer():
            g.start_time = time.perf_counter()
            logger.debug(f"Request: {request.method} {request.environ.get('RAW_URI', request.path)} "
                         f"from {request.remote_addr}")

        @self.app.after_request
        def record(response):
            start = g.get('start_time')
            if start is not None and self.monitor is not None:
                self.monitor.track_request(response.status_code, time.perf_counter() - start)
            if request.path.startswith(self.admin_prefix + '/'):
                response.headers['Cache-Control'] = 'no-cache, no-store, must-revalidate'
            logger.debug(f"Response: {response.status_code} for {request.path}")
            return response

    def _setup_error_handlers(self):
        self.app.register_error_handler(HTTPException, self.http_error)
        self.app.register_error_handler(MalformedAccept, self.bad_accept)
        self.app.register_error_handler(IntegrityFailure, self.integrity_error)
        self.app.register_error_handler(ConversionError, self.conversion_error)
        self.app.register_error_handler(UpstreamFailure, self.upstream_error)
        self.app.register_error_handler(Exception, self.handle_exception)

    # -- dissemination ------------------------------------------------------

    @staticmethod
    def original_url() -> str:
        """The URL the client asked for: the absolute request URI of a proxy request, else Host + path."""
        raw = request.environ.get('RAW_URI') or request.environ.get('REQUEST_URI') or ''
        if raw.lower().startswith(('http://', 'https://')):
            return raw
        return request.url

    def _lookup(self, url: str) -> Optional[PreservedResource]:
        resource = self.store.lookup(url)
        if resource is None and url.lower().startswith('http://'):
            resource = self.store.lookup('https://' + url[len('http://'):])
        return resource

    def handle_get(self, path: str = ''):
        url = self.original_url()
        accept = parse_accept(request.headers.get('Accept'), strict=self.strict_accept)

        origin_response = None
        if self.upstream_mode:
            forwarded, origin_response = self._try_upstream(url)
            if forwarded is not None:
                return forwarded

        try:
            resource = self._lookup(url)
        except IntegrityFailure as e:
            self._publish('integrity', {'url': e.url})
            raise
        if resource is None:
            if origin_response is not None:
                return origin_response
            return _plain(f"not found: {url}", 404)

        snapshot = self.registry.snapshot()
        outcome = self.decide(resource, accept, self.policy, snapshot)

        if outcome.decision is Decision.SERVE_ORIGINAL:
            logger.debug(f"Serving {resource.url} as stored ({resource.media_type})")
            response = Response(resource.body, 200, content_type=str(resource.media_type))
        elif outcome.decision is Decision.SERVE_CONVERTED:
            response = self._serve_converted(resource, outcome.plan, snapshot)
        else:
            logger.info(f"406 for {resource.url}: stored {resource.media_type}, "
                        f"Accept {request.headers.get('Accept')!r}")
            self._publish('not_acceptable', {
                'url': resource.url,
                'media_type': str(resource.media_type),
                'accept': request.headers.get('Accept'),
            })
            response = _plain('\n'.join(str(mt) for mt in outcome.available), 406)

        response.headers['Vary'] = 'Accept'
        return response

    def _serve_converted(self, resource: PreservedResource, plan: ConversionPlan,
                         snapshot: RegistrySnapshot) -> Response:
        descriptor = snapshot.get(plan.converter_id)
        key = CacheKey(resource.digest, str(plan.target), descriptor.id, descriptor.version)
        conversion = ConversionRequest(resource.media_type, plan.target, resource.body)
        entry, hit = self.cache.get_or_convert(key, lambda: self.runner.run(descriptor, conversion))

        logger.info(f"Migrated {resource.url}: {resource.media_type} -> {plan.target} "
                    f"via {descriptor.id} ({'cached' if hit else 'converted'})")
        self._publish('migration', {
            'url': resource.url,
            'from': str(resource.media_type),
            'to': str(plan.target),
            'converter': descriptor.id,
            'cached': hit,
        })

        response = Response(entry.body, 200, content_type=str(plan.target))
        response.headers['X-Migrated-From'] = str(resource.media_type)
        for note in entry.notes:
            response.headers.add('X-Migration-Note', note)
        return response

    def _try_upstream(self, url: str):
        """
        Ask the publisher first.

        Returns:
            (forwarded, origin): forwarded is the response to send now (origin
            answered 200), origin is a non-200 origin response to use only if
            the URL was never preserved.

        Raises:
            UpstreamFailure: the origin is unreachable and upstream.strict is on.
        """
        headers = {k: v for k, v in request.headers.items()
                   if k.lower() not in HOP_BY_HOP and k.lower() != 'host'}
        try:
            upstream = self.upstream_session.request(request.method, url, headers=headers, stream=True,
                                                     timeout=self.upstream_timeout, allow_redirects=False)
        except requests.RequestException as e:
            if self.upstream_strict:
                raise UpstreamFailure(f"origin unreachable for {url}: {e}") from e
            logger.warning(f"Origin unreachable for {url}, serving preserved copy: {e}")
            return None, None

        kept = [(k, v) for k, v in upstream.headers.items() if k.lower() not in HOP_BY_HOP]
        if upstream.status_code == 200:
            logger.debug(f"Passing through publisher copy of {url}")
            response = Response(upstream.raw.stream(UPSTREAM_CHUNK, decode_content=False), 200, kept)
            response.call_on_close(upstream.close)
            return response, None

        logger.info(f"Origin answered {upstream.status_code} for {url}, trying the archive")
        try:
            body = upstream.content
        finally:
            upstream.close()
        kept = [(k, v) for k, v in kept if k.lower() not in ('content-encoding', 'content-length')]
        return None, Response(body, upstream.status_code, kept)

    def _publish(self, kind: str, data: dict):
        if self.events is None:
            return
        try:
            self.events.publish_archive_event(kind, data)
        except Exception as e:
            logger.error(f"Could not publish {kind} event: {e}")

    # -- admin --------------------------------------------------------------

    def api_converters(self):
        return jsonify({'converters': [d.to_record() for d in self.registry.list_converters()]})

    def api_status(self):
        metrics = self.monitor.get_metrics() if self.monitor is not None else {}
        metrics['cache'] = {
            'entries': len(self.cache),
            'bytes': self.cache.total_bytes,
            'capacity_bytes': self.cache.capacity_bytes,
            'recent': [key._asdict() for key in reversed(self.cache.keys()[-RECENT_CACHE_KEYS:])],
        }
        metrics['timestamp'] = time.time()
        return jsonify(metrics)

    def health_check(self):
        """System health check endpoint."""
        try:
            mqtt_status = self.events.get_status() if self.events is not None else None
            health = {
                'status': 'healthy',
                'timestamp': time.time(),
                'services': {
                    'store': self.store is not None,
                    'gateway': self.is_running(),
                    'mqtt': mqtt_status['connected'] if mqtt_status is not None else None,
                },
                'mqtt': mqtt_status,
                'resources': len(self.store),
                'converters': len(self.registry.list_converters()),
                'version': VERSION
            }
            required = [v for k, v in health['services'].items() if k != 'mqtt']
            if not all(required):
                health['status'] = 'degraded'
            return jsonify(health)
        except Exception as e:
            logger.error(f"Health check failed: {e}")
            return jsonify({'status': 'unhealthy', 'error': str(e), 'timestamp': time.time()}), 500

    # -- error handlers -----------------------------------------------------

    def http_error(self, error: HTTPException):
        return error

    def bad_accept(self, error: MalformedAccept):
        return _plain(f"malformed Accept header: {error}", 400)

    def integrity_error(self, error: IntegrityFailure):
        logger.error(f"Integrity failure serving {error.url}")
        return _plain(f"integrity failure: {error.url}", 500)

    def conversion_error(self, error: ConversionError):
        logger.error(f"Conversion failed: {error}")
        return _plain(f"conversion failed: {error}", 500)

    def upstream_error(self, error: UpstreamFailure):
        logger.error(f"Upstream failure: {error}")
        return _plain(f"upstream failure: {error}", 502)

    def handle_exception(self, e):
        logger.error(f"Unhandled exception: {e}", exc_info=True)
        return _plain("internal server error", 500)

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> bool:
        """Bind the threaded server and serve from a background thread."""
        if self.running:
            return False
        try:
            self.server = make_server(self.host, self.port, self.app, threaded=True)
        except OSError as e:
            logger.error(f"Cannot listen on {self.host}:{self.port}: {e}")
            return False
        self.port = self.server.server_port
        self.running = True
        self.thread = Thread(target=self._run_server, daemon=True)
        self.thread.start()
        logger.info(f"Gateway started at {self.get_url()}")
        return True

    def _run_server(self):
        try:
            self.server.serve_forever()
        except Exception as e:
            logger.error(f"Gateway server error: {e}")
        finally:
            self.running = False

    def stop(self):
        if self.server is not None and self.running:
            self.server.shutdown()
            logger.info("Gateway stopped")
        self.running = False

    def is_running(self) -> bool:
        return bool(self.running and self.thread is not None and self.thread.is_alive())

    def get_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def cleanup(self):
        self.stop()
        if self.thread and self.thread.is_alive():
            self.thread.join(timeout=2.0)
        if self.server is not None:
            self.server.server_close()
            self.server = None
        logger.info("Gateway cleaned up")
