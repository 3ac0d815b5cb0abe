# tests/test_gateway.py
import random
import statistics
import tempfile
import threading
import time
import unittest
from pathlib import Path
from unittest.mock import Mock

import numpy as np
import requests

from converters import (ConversionRequest, ConversionResult, ConverterRunner, builtin_descriptor, check_builtin,
                        convert_gif_to_png)
from gateway import Decision, Gateway, decide
from gif_fixtures import comparable, corpus, decode_png_rgba, noise_gif
from negotiation import EMPTY_POLICY, ObsolescencePolicy, match_quality, parse_accept, parse_media_type
from performance_monitor import PerformanceMonitor
from registry import KIND_EXTERNAL, ConverterDescriptor, Registry
from store import Store

GIF_URL = 'http://example.org/img/fig1.gif'
UNIVERSE = ['image/gif', 'image/png', 'image/webp', 'image/jpeg', 'text/plain', 'text/html']


def upstream_response(status=200, chunks=(), headers=None, content=b''):
    response = Mock()
    response.status_code = status
    response.headers = headers or {}
    response.raw.stream.return_value = iter(chunks)
    response.content = content
    return response


class GatewayTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.config = {
            'store': {'path': str(Path(self.tmp.name) / 'store')},
            'gateway': {'listen_address': '127.0.0.1:0', 'admin_prefix': '/_migrado'},
            'negotiation': {'obsolete_types': [], 'strict_accept_parsing': False},
            'upstream': {'mode': False, 'strict': False, 'timeout_ms': 500},
            'cache': {'bytes': 16 * 1024 * 1024},
        }
        self.store = Store(self.config)
        self.monitor = PerformanceMonitor()
        self.events = Mock()
        self.events.get_status.return_value = {'connected': True, 'broker': 'localhost:1883'}
        self.fixtures = corpus()
        self.gif, self.gif_raster = self.fixtures['two_colour_checker']
        self.store.ingest_bytes(GIF_URL, 'image/gif', self.gif)

    def tearDown(self):
        self.tmp.cleanup()

    def build(self, obsolete=(), builtins=('gif2png',), descriptors=(), runner=None, **sections):
        config = {k: dict(v) for k, v in self.config.items()}
        config['negotiation']['obsolete_types'] = list(obsolete)
        for name, values in sections.items():
            config[name].update(values)
        registry = Registry(builtin_validator=check_builtin)
        for converter_id in builtins:
            registry.register(builtin_descriptor(converter_id))
        for descriptor in descriptors:
            registry.register(descriptor)
        runner = runner or ConverterRunner(config, monitor=self.monitor)
        upstream_session = sections.get('upstream', {}).get('session')
        self.gateway = Gateway(config, self.store, registry, runner, monitor=self.monitor,
                               events=self.events, upstream_session=upstream_session)
        return self.gateway.app.test_client()

    def get(self, client, url=GIF_URL, accept=None, method='GET', **kwargs):
        headers = {'Accept': accept} if accept is not None else {}
        return client.open(url, method=method, headers=headers, **kwargs)


class TestDissemination(GatewayTestCase):
    def test_original_served_before_obsolescence(self):
        client = self.build(builtins=())
        response = self.get(client, accept='*/*;q=0.1')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.headers['Content-Type'], 'image/gif')
        self.assertEqual(response.data, self.gif)
        self.assertEqual(response.headers['Vary'], 'Accept')
        self.assertNotIn('X-Migrated-From', response.headers)

    def test_obsolete_gif_served_as_png_at_same_url(self):
        client = self.build(obsolete=['image/gif'])
        response = self.get(client, accept='*/*;q=0.1')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.headers['Content-Type'], 'image/png')
        self.assertEqual(response.headers['X-Migrated-From'], 'image/gif')
        self.assertEqual(response.headers['Vary'], 'Accept')
        self.assertEqual(response.request.url, GIF_URL)
        np.testing.assert_array_equal(comparable(decode_png_rgba(response.data)), comparable(self.gif_raster))
        self.events.publish_archive_event.assert_called_with('migration', {
            'url': GIF_URL, 'from': 'image/gif', 'to': 'image/png', 'converter': 'gif2png', 'cached': False,
        })

    def test_whole_corpus_migrates(self):
        client = self.build(obsolete=['image/gif'])
        for name, (gif, raster) in self.fixtures.items():
            with self.subTest(fixture=name):
                url = f'http://example.org/corpus/{name}.gif'
                self.store.ingest_bytes(url, 'image/gif', gif)
                response = self.get(client, url, accept='image/png, */*;q=0.1')
                self.assertEqual(response.status_code, 200)
                np.testing.assert_array_equal(comparable(decode_png_rgba(response.data)), comparable(raster))

    def test_original_wins_when_acceptable(self):
        client = self.build()
        response = self.get(client, accept='image/png, image/gif;q=0.1')
        self.assertEqual(response.headers['Content-Type'], 'image/gif')
        self.assertEqual(response.data, self.gif)

    def test_no_accept_header_gets_original(self):
        response = self.get(self.build())
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data, self.gif)

    def test_not_acceptable_without_converters(self):
        client = self.build(obsolete=['image/gif'], builtins=())
        response = self.get(client, accept='*/*;q=0.1')
        self.assertEqual(response.status_code, 406)
        self.assertEqual(response.data, b'image/gif\n')
        self.assertTrue(response.headers['Content-Type'].startswith('text/plain'))
        self.assertEqual(response.headers['Vary'], 'Accept')
        self.assertEqual(self.events.publish_archive_event.call_args[0][0], 'not_acceptable')

    def test_explicit_rejection_without_converters(self):
        response = self.get(self.build(builtins=()), accept='image/gif;q=0')
        self.assertEqual(response.status_code, 406)
        self.assertEqual(response.data, b'image/gif\n')

    def test_not_acceptable_lists_reachable_types(self):
        webp = ConverterDescriptor('gif2webp', parse_media_type('image/gif'), parse_media_type('image/webp'),
                                   kind=KIND_EXTERNAL, command=('gif2webp',))
        client = self.build(obsolete=['image/gif'], descriptors=[webp])
        response = self.get(client, accept='image/jpeg')
        self.assertEqual(response.status_code, 406)
        self.assertEqual(response.data.decode().splitlines(), ['image/gif', 'image/png', 'image/webp'])

    def test_head_matches_get(self):
        for obsolete in ([], ['image/gif']):
            with self.subTest(obsolete=obsolete):
                client = self.build(obsolete=obsolete)
                got = self.get(client, accept='*/*;q=0.1')
                head = self.get(client, accept='*/*;q=0.1', method='HEAD')
                self.assertEqual(head.status_code, 200)
                self.assertEqual(head.data, b'')
                for name in ('Content-Type', 'Content-Length', 'Vary'):
                    self.assertEqual(head.headers.get(name), got.headers.get(name))

    def test_other_methods_not_allowed(self):
        client = self.build()
        for method in ('POST', 'PUT', 'DELETE', 'OPTIONS', 'PATCH'):
            with self.subTest(method=method):
                self.assertEqual(self.get(client, method=method).status_code, 405)

    def test_unknown_url(self):
        response = self.get(self.build(), 'http://example.org/never/collected')
        self.assertEqual(response.status_code, 404)
        self.assertIn(b'http://example.org/never/collected', response.data)

    def test_params_on_stored_type_preserved(self):
        self.store.ingest_bytes('http://example.org/notes.txt', 'text/plain; charset=latin-1', b'caf\xe9')
        response = self.get(self.build(), 'http://example.org/notes.txt', accept='text/*')
        self.assertEqual(response.headers['Content-Type'], 'text/plain; charset=latin-1')
        self.assertEqual(response.data, b'caf\xe9')

    def test_text_migrates_to_html(self):
        self.store.ingest_bytes('http://example.org/readme.txt', 'text/plain', b'1 < 2')
        client = self.build(builtins=('text2html',))
        response = self.get(client, 'http://example.org/readme.txt', accept='text/html')
        self.assertEqual(response.headers['Content-Type'], 'text/html')
        self.assertIn(b'<pre>1 &lt; 2</pre>', response.data)


class TestRequestUrl(GatewayTestCase):
    def test_absolute_request_uri(self):
        client = self.build()
        response = client.get('/img/fig1.gif', base_url='http://gateway.local',
                              environ_overrides={'RAW_URI': GIF_URL})
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data, self.gif)

    def test_host_and_path(self):
        client = self.build()
        self.assertEqual(client.get('/img/fig1.gif', base_url='http://example.org').status_code, 200)
        self.assertEqual(client.get('/img/fig1.gif', base_url='http://elsewhere.org').status_code, 404)

    def test_https_copy_found_for_http_request(self):
        self.store.ingest_bytes('https://secure.example.org/doc.txt', 'text/plain', b'secure')
        response = self.get(self.build(), 'http://secure.example.org/doc.txt')
        self.assertEqual(response.data, b'secure')


class TestNegotiationBruteForce(GatewayTestCase):
    def random_header(self, rng):
        if rng.random() < 0.1:
            return None
        ranges = []
        for _ in range(rng.randrange(0, 5)):
            choice = rng.random()
            if choice < 0.6:
                pattern = rng.choice(UNIVERSE)
            elif choice < 0.85:
                pattern = rng.choice(['image/*', 'text/*'])
            else:
                pattern = '*/*'
            q = rng.choice(['', ';q=0', ';q=0.1', ';q=0.5', ';q=1'])
            ranges.append(pattern + q)
        return ', '.join(ranges)

    def test_not_acceptable_exactly_when_nothing_reachable(self):
        rng = random.Random(2024)
        for mt in UNIVERSE:
            self.store.ingest_bytes(f'http://example.org/r/{mt}', mt, f'body of {mt}'.encode())
        runner = Mock()
        runner.run.side_effect = lambda d, req: ConversionResult(b'converted by ' + d.id.encode(), d.output)

        for trial in range(200):
            stored = rng.choice(UNIVERSE)
            header = self.random_header(rng)
            obsolete = [mt for mt in UNIVERSE if rng.random() < 0.3]
            descriptors = [
                ConverterDescriptor(f"{a.replace('/', '-')}--{b.replace('/', '-')}", parse_media_type(a),
                                    parse_media_type(b), cost=rng.randrange(1, 5),
                                    kind=KIND_EXTERNAL, command=('convert',))
                for a in UNIVERSE for b in UNIVERSE if a != b and rng.random() < 0.15
            ]
            client = self.build(obsolete=obsolete, builtins=(), descriptors=descriptors, runner=runner)
            response = self.get(client, f'http://example.org/r/{stored}', accept=header)

            policy = ObsolescencePolicy.from_types(obsolete)
            accept = parse_accept(header)
            source = parse_media_type(stored)
            candidates = [d for d in descriptors if d.input == source]
            acceptable = [d for d in candidates if match_quality(d.output, accept, policy)]
            context = f"trial {trial}: stored={stored} accept={header!r} obsolete={obsolete}"

            if match_quality(source, accept, policy):
                self.assertEqual(response.status_code, 200, context)
                self.assertEqual(response.data, f'body of {stored}'.encode(), context)
            elif acceptable:
                self.assertEqual(response.status_code, 200, context)
                served = parse_media_type(response.headers['Content-Type'])
                best = max(match_quality(d.output, accept, policy).millis for d in acceptable)
                self.assertIn(served, [d.output for d in acceptable], context)
                self.assertEqual(match_quality(served, accept, policy).millis, best, context)
                self.assertEqual(response.headers['X-Migrated-From'], stored, context)
            else:
                self.assertEqual(response.status_code, 406, context)
                listed = response.data.decode().splitlines()
                self.assertEqual(listed, sorted({stored} | {str(d.output) for d in candidates}), context)


class TestIntegrity(GatewayTestCase):
    def test_one_corrupted_resource_isolated(self):
        urls = [f'http://example.org/page/{i}' for i in range(10)]
        digests = {url: self.store.ingest_bytes(url, 'text/plain', f'page {i}'.encode()) for i, url in enumerate(urls)}
        bad = urls[6]
        obj = Path(self.config['store']['path']) / 'objects' / digests[bad][:2] / digests[bad]
        data = bytearray(obj.read_bytes())
        data[0] ^= 0x01
        obj.write_bytes(bytes(data))

        report = self.store.verify()
        self.assertEqual(report.failed, [bad])

        client = self.build()
        for i, url in enumerate(urls):
            response = self.get(client, url)
            if url == bad:
                self.assertEqual(response.status_code, 500)
                self.assertEqual(response.data.decode(), f'integrity failure: {bad}\n')
            else:
                self.assertEqual(response.status_code, 200)
                self.assertEqual(response.data, f'page {i}'.encode())
        self.events.publish_archive_event.assert_any_call('integrity', {'url': bad})


class TestConversionResponses(GatewayTestCase):
    def test_migration_note_header(self):
        gif, _ = self.fixtures['animated_three_frames']
        url = 'http://example.org/anim.gif'
        self.store.ingest_bytes(url, 'image/gif', gif)
        client = self.build(obsolete=['image/gif'])
        for _ in range(2):
            response = self.get(client, url, accept='image/png')
            self.assertEqual(response.headers.getlist('X-Migration-Note'), ['animated-gif: first frame only'])

    def test_conversion_failure(self):
        url = 'http://example.org/broken.gif'
        self.store.ingest_bytes(url, 'image/gif', b'GIF89a\x00\x00garbage')
        response = self.get(self.build(obsolete=['image/gif']), url, accept='image/png')
        self.assertEqual(response.status_code, 500)
        self.assertTrue(response.data.startswith(b'conversion failed:'))

    def test_cached_bytes_match_fresh_conversion(self):
        client = self.build(obsolete=['image/gif'])
        first = self.get(client, accept='image/png').data
        second = self.get(client, accept='image/png').data
        fresh = convert_gif_to_png(ConversionRequest(parse_media_type('image/gif'),
                                                     parse_media_type('image/png'), self.gif)).body
        self.assertEqual(first, fresh)
        self.assertEqual(second, fresh)

    def test_repeated_requests_convert_once(self):
        client = self.build(obsolete=['image/gif'])
        for _ in range(20):
            self.assertEqual(self.get(client, accept='image/png').status_code, 200)
        self.assertEqual(self.monitor.conversion_count('gif2png'), 1)

    def test_concurrent_requests_convert_once(self):
        gif, _ = noise_gif(128, 128, seed=9)
        url = 'http://example.org/noise.gif'
        self.store.ingest_bytes(url, 'image/gif', gif)
        self.build(obsolete=['image/gif'])
        statuses = []
        lock = threading.Lock()

        def fetch():
            response = self.get(self.gateway.app.test_client(), url, accept='image/png')
            with lock:
                statuses.append(response.status_code)

        threads = [threading.Thread(target=fetch) for _ in range(20)]
        for t in threads:
            t.start()
        for t in threads:
            t.join(10.0)
        self.assertEqual(statuses, [200] * 20)
        self.assertEqual(self.monitor.conversion_count('gif2png'), 1)


class TestAcceptParsing(GatewayTestCase):
    def test_lenient_ignores_bad_ranges(self):
        client = self.build(obsolete=['image/gif'])
        response = self.get(client, accept='image/png;q=2, garbage, image/png;q=0.5')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.headers['Content-Type'], 'image/png')

    def test_strict_rejects_bad_header(self):
        client = self.build(negotiation={'strict_accept_parsing': True})
        response = self.get(client, accept='image/png;q=2')
        self.assertEqual(response.status_code, 400)
        self.assertTrue(response.data.startswith(b'malformed Accept header'))


class TestUpstream(GatewayTestCase):
    def build_upstream(self, strict=False):
        self.session = Mock()
        return self.build(upstream={'mode': True, 'strict': strict, 'session': self.session})

    def test_publisher_copy_passed_through(self):
        client = self.build_upstream()
        self.session.request.return_value = upstream_response(
            chunks=[b'live ', b'copy'], headers={'Content-Type': 'image/gif', 'Connection': 'close'})
        response = self.get(client, accept='image/png')
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data, b'live copy')
        self.assertEqual(response.headers['Content-Type'], 'image/gif')
        self.assertNotIn('Connection', response.headers)
        method, url = self.session.request.call_args[0]
        self.assertEqual((method, url), ('GET', GIF_URL))
        self.assertTrue(self.session.request.call_args[1]['stream'])

    def test_unreachable_publisher_falls_back(self):
        client = self.build_upstream()
        self.session.request.side_effect = requests.ConnectionError('no route to host')
        response = self.get(client)
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data, self.gif)

    def test_unreachable_publisher_strict(self):
        client = self.build_upstream(strict=True)
        self.session.request.side_effect = requests.Timeout('too slow')
        self.assertEqual(self.get(client).status_code, 502)

    def test_origin_error_for_unknown_url(self):
        client = self.build_upstream()
        self.session.request.return_value = upstream_response(
            status=404, content=b'publisher says no', headers={'Content-Type': 'text/plain'})
        response = self.get(client, 'http://example.org/unknown')
        self.assertEqual(response.status_code, 404)
        self.assertEqual(response.data, b'publisher says no')

    def test_origin_error_for_preserved_url(self):
        client = self.build_upstream()
        self.session.request.return_value = upstream_response(status=500, content=b'oops')
        response = self.get(client)
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.data, self.gif)


class TestAdminEndpoints(GatewayTestCase):
    def test_converters(self):
        client = self.build(builtins=('gif2png', 'text2html'))
        data = client.get('/_migrado/converters').get_json()
        self.assertEqual([c['id'] for c in data['converters']], ['gif2png', 'text2html'])

    def test_status(self):
        client = self.build(obsolete=['image/gif'])
        self.get(client, accept='image/png')
        response = client.get('/_migrado/status')
        data = response.get_json()
        self.assertEqual(data['cache']['entries'], 1)
        self.assertEqual(data['conversions']['gif2png']['count'], 1)
        self.assertEqual(data['function_calls']['decide']['count'], 1)
        self.assertEqual([(k['target'], k['converter_id']) for k in data['cache']['recent']],
                         [('image/png', 'gif2png')])
        self.assertIn('no-cache', response.headers['Cache-Control'])

    def test_health_when_not_serving(self):
        self.events.get_status.return_value = {'connected': False, 'broker': 'localhost:1883'}
        data = self.build().get('/_migrado/health').get_json()
        self.assertEqual(data['status'], 'degraded')
        self.assertEqual(data['resources'], 1)
        self.assertFalse(data['services']['mqtt'])
        self.assertEqual(data['mqtt']['broker'], 'localhost:1883')

    def test_health_without_mqtt(self):
        self.events = None
        data = self.build().get('/_migrado/health').get_json()
        self.assertIsNone(data['services']['mqtt'])
        self.assertIsNone(data['mqtt'])


class TestDecide(GatewayTestCase):
    def setUp(self):
        super().setUp()
        self.resource = self.store.lookup(GIF_URL)
        self.registry = Registry()
        self.registry.register(builtin_descriptor('gif2png'))

    def test_any_range_serves_original(self):
        outcome = decide(self.resource, parse_accept('*/*;q=0.1'), EMPTY_POLICY, Registry())
        self.assertIs(outcome.decision, Decision.SERVE_ORIGINAL)

    def test_obsolete_gif_converted(self):
        policy = ObsolescencePolicy.from_types(['image/gif'])
        outcome = decide(self.resource, parse_accept('image/png, */*;q=0.1'), policy, self.registry)
        self.assertIs(outcome.decision, Decision.SERVE_CONVERTED)
        self.assertEqual(outcome.plan.converter_id, 'gif2png')

    def test_rejected_with_empty_registry(self):
        outcome = decide(self.resource, parse_accept('image/gif;q=0'), EMPTY_POLICY, Registry())
        self.assertIs(outcome.decision, Decision.NOT_ACCEPTABLE)
        self.assertEqual([str(mt) for mt in outcome.available], ['image/gif'])


class TestLiveServer(GatewayTestCase):
    def setUp(self):
        super().setUp()
        self.build(obsolete=['image/gif'])
        self.assertTrue(self.gateway.start())
        self.http = requests.Session()
        self.http.trust_env = False

    def tearDown(self):
        self.http.close()
        self.gateway.cleanup()
        super().tearDown()

    def test_forward_proxy_request(self):
        response = self.http.get(GIF_URL, headers={'Accept': 'image/png'},
                                 proxies={'http': self.gateway.get_url()}, timeout=5)
        self.assertEqual(response.status_code, 200)
        self.assertEqual(response.headers['Content-Type'], 'image/png')

    def test_migration_latency(self):
        gif, _ = noise_gif(320, 320)
        self.assertGreaterEqual(len(gif), 100 * 1024)
        url = f'{self.gateway.get_url()}/big.gif'
        self.store.ingest_bytes(url, 'image/gif', gif)

        start = time.perf_counter()
        cold = self.http.get(url, headers={'Accept': 'image/png'}, timeout=5)
        cold_time = time.perf_counter() - start
        self.assertEqual(cold.status_code, 200)
        self.assertLess(cold_time, 0.5)

        warm_times = []
        for _ in range(19):
            start = time.perf_counter()
            warm = self.http.get(url, headers={'Accept': 'image/png'}, timeout=5)
            warm_times.append(time.perf_counter() - start)
            self.assertEqual(warm.content, cold.content)
        self.assertLess(statistics.median(warm_times), 0.02)
        self.assertEqual(self.monitor.conversion_count('gif2png'), 1)

    def test_health_while_serving(self):
        data = self.http.get(f'{self.gateway.get_url()}/_migrado/health', timeout=5).json()
        self.assertEqual(data['status'], 'healthy')


if __name__ == '__main__':
    unittest.main()
