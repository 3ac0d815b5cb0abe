# tests/test_config.py
import json
import os
import tempfile
import unittest
from unittest.mock import patch

from config import CONFIG_ENV, DEFAULTS, Config, deep_merge, split_listen_address
from errors import ConfigError


class TestConfig(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'migrado_config.json')

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, document):
        with open(self.path, 'w', encoding='utf-8') as f:
            if isinstance(document, str):
                f.write(document)
            else:
                json.dump(document, f)

    def test_missing_file_gives_defaults(self):
        config = Config(os.path.join(self.tmp.name, 'absent.json'))
        self.assertEqual(config.data, DEFAULTS)
        self.assertEqual(config.listen_address, '127.0.0.1:8080')
        self.assertEqual(config.cache_bytes, 256 * 1024 * 1024)
        self.assertEqual(config.obsolete_types, [])
        self.assertFalse(config.upstream_mode)
        config.validate()

    def test_file_merged_over_defaults(self):
        self.write({'negotiation': {'obsolete_types': ['image/gif']}, 'cache': {'bytes': 1024}})
        config = Config(self.path)
        self.assertEqual(config.obsolete_types, ['image/gif'])
        self.assertFalse(config.strict_accept_parsing)
        self.assertEqual(config.cache_bytes, 1024)
        self.assertEqual(config.section('mqtt')['topics']['events'], 'migrado/events')

    def test_environment_variable(self):
        self.write({'store': {'path': '/srv/archive'}})
        with patch.dict(os.environ, {CONFIG_ENV: self.path}):
            self.assertEqual(Config().store_path, '/srv/archive')

    def test_malformed_json(self):
        self.write('{"gateway": ')
        with self.assertRaises(ConfigError):
            Config(self.path)

    def test_non_object_document(self):
        self.write([1, 2, 3])
        with self.assertRaises(ConfigError):
            Config(self.path)

    def test_overrides_skip_unset_flags(self):
        config = Config(os.path.join(self.tmp.name, 'absent.json'))
        config.apply_overrides({'cache.bytes': 99, 'store.path': None, 'upstream.mode': True})
        self.assertEqual(config.cache_bytes, 99)
        self.assertEqual(config.store_path, 'store')
        self.assertTrue(config.upstream_mode)
        self.assertEqual(config.file_data, {})
        with self.assertRaises(ConfigError):
            config.apply_overrides({'nosection': 1})

    def test_validate_rejects_bad_values(self):
        cases = [
            {'gateway': {'listen_address': 'localhost'}},
            {'gateway': {'listen_address': 'localhost:http'}},
            {'negotiation': {'obsolete_types': ['image/*']}},
            {'cache': {'bytes': -1}},
            {'converters': {'external_concurrency': 0}},
            {'upstream': {'timeout_ms': 0}},
            {'registry': {'urls': 'http://one.example/'}},
            {'logging': {'level': 'LOUD'}},
        ]
        for document in cases:
            with self.subTest(document=document):
                self.write(document)
                with self.assertRaises(ConfigError):
                    Config(self.path).validate()

    def test_set_saves_file(self):
        self.write({'cache': {'bytes': 10}})
        config = Config(self.path)
        config.set('registry', {'urls': ['http://converters.example/manifest.json']})
        reloaded = Config(self.path)
        self.assertEqual(reloaded.registry_urls, ['http://converters.example/manifest.json'])
        self.assertEqual(reloaded.cache_bytes, 10)

    def test_load_then_save_is_value_identical(self):
        document = {
            'gateway': {'listen_address': '0.0.0.0:8081'},
            'negotiation': {'obsolete_types': ['image/gif', 'image/x-bitmap'], 'strict_accept_parsing': True},
            'converters': {'external': [{'id': 'gif2webp', 'input': 'image/gif', 'output': 'image/webp',
                                         'kind': 'external-command', 'command': ['gif2webp', '-'],
                                         'cost': 50, 'version': '1.2'}],
                           'external_timeout': 12.5},
            'mqtt': {'enabled': False, 'username': None, 'client_id': 'archivo-café'},
        }
        self.write(document)
        config = Config(self.path)
        config.save_config()
        with open(self.path, encoding='utf-8') as f:
            self.assertEqual(json.load(f), document)
        self.assertEqual(Config(self.path).data, config.data)

    def test_shipped_config_is_valid(self):
        shipped = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'migrado_config.json')
        config = Config(shipped)
        config.validate()
        self.assertEqual(set(config.file_data), set(DEFAULTS))


class TestHelpers(unittest.TestCase):
    def test_deep_merge(self):
        base = {'a': {'x': 1, 'y': 2}, 'b': [1]}
        merged = deep_merge(base, {'a': {'y': 3}, 'b': [2], 'c': None})
        self.assertEqual(merged, {'a': {'x': 1, 'y': 3}, 'b': [2], 'c': None})
        self.assertEqual(base['a']['y'], 2)

    def test_split_listen_address(self):
        self.assertEqual(split_listen_address('0.0.0.0:8080'), ('0.0.0.0', 8080))
        self.assertEqual(split_listen_address('127.0.0.1:0'), ('127.0.0.1', 0))
        self.assertEqual(split_listen_address('[::1]:9000'), ('::1', 9000))
        for bad in (':8080', 'host:70000', 8080):
            with self.subTest(address=bad):
                with self.assertRaises(ConfigError):
                    split_listen_address(bad)


if __name__ == '__main__':
    unittest.main()
