import logging
from typing import Optional
from urllib.parse import urlsplit

import requests

from errors import FetchFailed, PermissionDenied

logger = logging.getLogger(__name__)

DEFAULT_USER_AGENT = 'migrado-crawler/1.0'
PERMISSION_PATH = '/lockss-permission'


class Fetcher:
    """
    HTTP client used to collect content and converter manifests.

    Wraps a requests.Session so every outbound request carries the crawler
    User-Agent and the configured timeout.
    """

    def __init__(self, config: dict = None, session: Optional[requests.Session] = None):
        """
        Args:
            config: Dictionary with an optional 'store' section containing
                'user_agent', 'fetch_timeout' and 'permission_stub'.
            session: Session to reuse (tests pass a Mock).
        """
        store_config = (config or {}).get('store', {})
        self.user_agent = store_config.get('user_agent', DEFAULT_USER_AGENT)
        self.timeout = float(store_config.get('fetch_timeout', 10.0))
        self.permission_stub = bool(store_config.get('permission_stub', False))
        self.session = session or requests.Session()
        self.session.headers.update({'User-Agent': self.user_agent})

    def get(self, url: str) -> requests.Response:
        """GET url; raises FetchFailed on network errors or a non-200 status."""
        try:
            response = self.session.get(url, timeout=self.timeout, allow_redirects=True)
        except requests.RequestException as e:
            raise FetchFailed(url, str(e)) from e
        if response.status_code != 200:
            raise FetchFailed(url, f"HTTP {response.status_code}", status=response.status_code)
        logger.debug(f"Fetched {url}: {len(response.content)} bytes")
        return response

    def check_permission(self, url: str) -> None:
        """Require <origin>/lockss-permission to answer 200 when the permission stub is on."""
        if not self.permission_stub:
            return
        parts = urlsplit(url)
        permission_url = f"{parts.scheme}://{parts.netloc}{PERMISSION_PATH}"
        try:
            response = self.session.get(permission_url, timeout=self.timeout)
        except requests.RequestException as e:
            raise PermissionDenied(f"permission check for {url} failed: {e}") from e
        if response.status_code != 200:
            raise PermissionDenied(
                f"publisher has not granted permission ({permission_url} -> {response.status_code})")
        logger.info(f"Permission granted by {permission_url}")
