import paho.mqtt.client as mqtt
import json
import logging
import threading
import time
from typing import Dict, Any

logger = logging.getLogger(__name__)

EVENT_KINDS = ('migration', 'not_acceptable', 'integrity', 'sync')
CONNECT_WAIT = 5.0
KEEPALIVE = 60


class MQTTWorker:
    """
    Optional archive telemetry.

    Events (migrations, 406s, integrity failures, registry syncs) go to the
    events topic as they happen; a retained status document built from the
    PerformanceMonitor goes to the status topic every ``publish_interval``
    seconds. Nothing here ever blocks or fails a gateway request: a worker
    that is not connected drops events and says so in the debug log.
    """

    def __init__(self, config: dict, monitor=None):
        settings = config.get('mqtt', {})
        self.monitor = monitor
        self.client = None
        self.connected = False
        self.running = False
        self.publish_thread = None
        self._stop = threading.Event()

        self.host = settings.get('host', 'localhost')
        self.port = int(settings.get('port', 1883))
        self.client_id = settings.get('client_id', 'migrado_gateway')
        self.credentials = (settings.get('username'), settings.get('password'))

        topics = settings.get('topics', {})
        self.topic_events = topics.get('events', 'migrado/events')
        self.topic_status = topics.get('status', 'migrado/status')

        self.publish_interval = float(settings.get('publish_interval', 30.0))
        self.last_status_publish = 0.0

        logger.info(f"MQTT worker for {self.host}:{self.port} as {self.client_id}")

    def start(self) -> bool:
        if self.running:
            return True
        if not self.connect():
            return False

        self.running = True
        self._stop.clear()
        self.publish_thread = threading.Thread(target=self._publish_loop, name='mqtt-status', daemon=True)
        self.publish_thread.start()
        logger.info("MQTT worker started")
        return True

    def stop(self):
        self.running = False
        self._stop.set()
        if self.publish_thread is not None and self.publish_thread.is_alive():
            self.publish_thread.join(timeout=2.0)
        if self.client is not None:
            self.client.loop_stop()
            self.client.disconnect()
        logger.info("MQTT worker stopped")

    def _create_client(self):
        # paho-mqtt 2.x requires the callback API version; 1.x does not know it
        callback_api = getattr(mqtt, 'CallbackAPIVersion', None)
        if callback_api is not None:
            return mqtt.Client(callback_api.VERSION1, client_id=self.client_id)
        try:
            return mqtt.Client(client_id=self.client_id)
        except TypeError:
            return mqtt.Client(self.client_id)

    def connect(self) -> bool:
        """Connect and wait up to CONNECT_WAIT seconds for the broker's CONNACK."""
        try:
            client = self._create_client()
            client.on_connect = self._on_connect
            client.on_disconnect = self._on_disconnect
            client.on_publish = self._on_publish
            username, password = self.credentials
            if username and password:
                client.username_pw_set(username, password)
            self.client = client

            client.connect(self.host, self.port, KEEPALIVE)
            client.loop_start()
        except Exception as e:
            logger.error(f"Cannot reach MQTT broker {self.host}:{self.port}: {e}")
            return False

        deadline = time.monotonic() + CONNECT_WAIT
        while not self.connected and time.monotonic() < deadline:
            self._stop.wait(0.1)
        if not self.connected:
            logger.warning(f"No CONNACK from {self.host}:{self.port} within {CONNECT_WAIT}s")
        return self.connected

    def publish_archive_event(self, kind: str, data: Dict[str, Any]) -> bool:
        """
        Publish one archive event.

        Args:
            kind: one of EVENT_KINDS
            data: event fields (url, media types, converter id, ...)

        Returns:
            True when the client accepted the message.
        """
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown archive event kind {kind!r}")
        if not self.connected or self.client is None:
            logger.debug(f"Dropping {kind} event: MQTT not connected")
            return False

        now = time.time()
        payload = dict(data, event=kind, timestamp=now,
                       timestamp_iso=time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime(now)))
        ok = self._publish_json(self.topic_events, payload, qos=1)
        if ok:
            logger.debug(f"Published {kind} event for {data.get('url')}")
        else:
            logger.error(f"Failed to publish {kind} event")
        return ok

    def publish_status(self, force: bool = False) -> bool:
        """Publish the retained metrics document, at most once per publish_interval unless forced."""
        if not self.connected:
            return False

        now = time.time()
        if not force and now - self.last_status_publish < self.publish_interval:
            return False

        metrics = self.monitor.get_metrics() if self.monitor is not None else {}
        document = {
            'requests': metrics.get('requests', 0),
            'responses': metrics.get('responses', {}),
            'cache_hits': metrics.get('cache_hits', 0),
            'cache_misses': metrics.get('cache_misses', 0),
            'conversions': {cid: stats.get('count', 0) for cid, stats in metrics.get('conversions', {}).items()},
            'timestamp': now,
        }
        if not self._publish_json(self.topic_status, document, retain=True):
            return False
        self.last_status_publish = now
        logger.debug("Published gateway status")
        return True

    def _publish_json(self, topic: str, data: dict, qos: int = 0, retain: bool = False) -> bool:
        if not self.connected or self.client is None:
            return False
        try:
            info = self.client.publish(topic, json.dumps(data), qos=qos, retain=retain)
        except Exception as e:
            logger.error(f"Error publishing to {topic}: {e}")
            return False
        if info.rc != mqtt.MQTT_ERR_SUCCESS:
            logger.warning(f"Publish to {topic} refused: {mqtt.error_string(info.rc)}")
            return False
        return True

    def _publish_loop(self):
        while not self._stop.wait(1.0):
            try:
                self.publish_status()
            except Exception as e:
                logger.error(f"Status publish failed: {e}")
                self._stop.wait(5.0)

    def _on_connect(self, client, userdata, flags, rc):
        self.connected = rc == 0
        if self.connected:
            logger.info(f"MQTT connected to {self.host}:{self.port}")
            self.publish_status(force=True)
        else:
            logger.error(f"MQTT broker refused connection: {mqtt.connack_string(rc)} (code {rc})")

    def _on_disconnect(self, client, userdata, rc):
        self.connected = False
        if rc:
            logger.warning(f"MQTT connection lost: {mqtt.error_string(rc)}")
        else:
            logger.info("MQTT disconnected")

    def _on_publish(self, client, userdata, mid):
        logger.debug(f"MQTT message {mid} delivered")

    def is_connected(self) -> bool:
        return self.connected

    def get_status(self) -> Dict[str, Any]:
        return {
            'connected': self.is_connected(),
            'running': self.running,
            'broker': f"{self.host}:{self.port}",
            'client_id': self.client_id,
            'topics': {'events': self.topic_events, 'status': self.topic_status},
        }

    def cleanup(self):
        self.stop()
