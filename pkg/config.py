# config.py
# Loads the gateway configuration: one JSON document merged over DEFAULTS.
import copy
import json
import logging
import os

from errors import ConfigError, MalformedMediaType
from negotiation import parse_media_type

CONFIG_ENV = 'MIGRADO_CONFIG'
DEFAULT_CONFIG_FILE = 'migrado_config.json'

DEFAULTS = {
    'gateway': {
        'listen_address': '127.0.0.1:8080',
        'admin_prefix': '/_migrado'
    },
    'store': {
        'path': 'store',
        'permission_stub': False,
        'user_agent': 'migrado-crawler/1.0',
        'fetch_timeout': 10.0
    },
    'negotiation': {
        'obsolete_types': [],
        'strict_accept_parsing': False
    },
    'upstream': {
        'mode': False,
        'timeout_ms': 2000,
        'strict': False
    },
    'cache': {
        'bytes': 256 * 1024 * 1024
    },
    'converters': {
        'builtin': ['gif2png', 'text2html'],
        'external': [],
        'external_concurrency': 4,
        'external_timeout': 30.0
    },
    'registry': {
        'urls': []
    },
    'logging': {
        'level': 'INFO',
        'file': 'logs/migrado.log'
    },
    'mqtt': {
        'enabled': False,
        'host': 'localhost',
        'port': 1883,
        'client_id': 'migrado_gateway',
        'username': None,
        'password': None,
        'publish_interval': 30.0,
        'topics': {
            'events': 'migrado/events',
            'status': 'migrado/status'
        }
    }
}

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


def deep_merge(base: dict, override: dict) -> dict:
    """Return base with override applied; nested dicts merge, everything else replaces."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def split_listen_address(address: str):
    """'host:port' (or '[v6]:port') -> (host, port)."""
    if not isinstance(address, str) or ':' not in address:
        raise ConfigError(f"listen_address must look like host:port, got {address!r}")
    host, _, port_text = address.rpartition(':')
    host = host.strip('[]')
    try:
        port = int(port_text)
    except ValueError:
        raise ConfigError(f"bad port in listen_address {address!r}") from None
    if not host or not 0 <= port <= 65535:
        raise ConfigError(f"bad listen_address {address!r}")
    return host, port


def resolve_config_path(config_file=None):
    """--config flag, else $MIGRADO_CONFIG, else migrado_config.json."""
    return config_file or os.environ.get(CONFIG_ENV) or DEFAULT_CONFIG_FILE


class Config:
    def __init__(self, config_file=None):
        self.config_file = resolve_config_path(config_file)
        self.file_data = self.load_config()
        self.data = deep_merge(DEFAULTS, self.file_data)

    def load_config(self):
        if not os.path.exists(self.config_file):
            logging.warning(f"Config file {self.config_file} not found. Using default settings.")
            return {}
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                document = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error decoding JSON from config file {self.config_file}: {e}") from e
        except OSError as e:
            raise ConfigError(f"Cannot read config file {self.config_file}: {e}") from e
        if not isinstance(document, dict):
            raise ConfigError(f"Config file {self.config_file} must hold a JSON object")
        return document

    def get(self, key, default=None):
        return self.data.get(key, default)

    def section(self, key) -> dict:
        return self.data.get(key, {})

    def set(self, key, value):
        self.data[key] = value
        self.file_data[key] = copy.deepcopy(value)
        self.save_config()

    def apply_overrides(self, overrides: dict):
        """
        Apply command-line values keyed 'section.key'; None means the flag was not given.
        Overrides change the running configuration only, never the file.
        """
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.partition('.')
            if not key:
                raise ConfigError(f"override key must be 'section.key', got {dotted!r}")
            self.data.setdefault(section, {})[key] = value

    def save_config(self, path=None):
        target = path or self.config_file
        try:
            with open(target, 'w', encoding='utf-8') as f:
                json.dump(self.file_data, f, indent=4, ensure_ascii=False)
                f.write('\n')
        except OSError as e:
            logging.error(f"Error saving config to file: {e}")
            raise ConfigError(f"Cannot write config file {target}: {e}") from e

    def validate(self):
        """Validate configuration values; raises ConfigError."""
        split_listen_address(self.listen_address)

        for text in self.obsolete_types:
            try:
                parse_media_type(text)
            except (MalformedMediaType, TypeError) as e:
                raise ConfigError(f"obsolete_types entry {text!r} is not a media type: {e}") from e

        if not isinstance(self.cache_bytes, int) or isinstance(self.cache_bytes, bool) or self.cache_bytes < 0:
            raise ConfigError(f"cache.bytes must be an integer >= 0, got {self.cache_bytes!r}")
        if not isinstance(self.external_concurrency, int) or self.external_concurrency < 1:
            raise ConfigError(f"converters.external_concurrency must be >= 1, got {self.external_concurrency!r}")
        if not isinstance(self.upstream_timeout_ms, (int, float)) or self.upstream_timeout_ms <= 0:
            raise ConfigError(f"upstream.timeout_ms must be > 0, got {self.upstream_timeout_ms!r}")
        if not isinstance(self.registry_urls, list) or not all(isinstance(u, str) for u in self.registry_urls):
            raise ConfigError("registry.urls must be a list of URLs")
        if not isinstance(self.section('converters').get('external', []), list):
            raise ConfigError("converters.external must be a list of descriptor objects")

        level = str(self.section('logging').get('level', 'INFO')).upper()
        if level not in LOG_LEVELS:
            raise ConfigError(f"logging.level must be one of {', '.join(LOG_LEVELS)}")

    # Flat view used by the gateway and the CLI

    @property
    def listen_address(self) -> str:
        return self.section('gateway').get('listen_address')

    @property
    def store_path(self) -> str:
        return self.section('store').get('path')

    @property
    def obsolete_types(self) -> list:
        return list(self.section('negotiation').get('obsolete_types', []))

    @property
    def strict_accept_parsing(self) -> bool:
        return bool(self.section('negotiation').get('strict_accept_parsing', False))

    @property
    def upstream_mode(self) -> bool:
        return bool(self.section('upstream').get('mode', False))

    @property
    def upstream_timeout_ms(self):
        return self.section('upstream').get('timeout_ms')

    @property
    def cache_bytes(self):
        return self.section('cache').get('bytes')

    @property
    def external_concurrency(self):
        return self.section('converters').get('external_concurrency')

    @property
    def permission_stub(self) -> bool:
        return bool(self.section('store').get('permission_stub', False))

    @property
    def registry_urls(self) -> list:
        return self.section('registry').get('urls', [])
