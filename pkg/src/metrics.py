from prometheus_client import Counter, Gauge, Histogram, start_http_server
import logging
import threading
import time

logger = logging.getLogger(__name__)


class MetricsManager:
    _instance = None
    _lock = threading.Lock()

    def __new__(cls):
        with cls._lock:
            if cls._instance is None:
                cls._instance = super(MetricsManager, cls).__new__(cls)
                cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self._initialized = True
        self._server_port = None

        self.runs = Counter(
            'eav_runs_total',
            'Total number of denoising runs',
            ['strategy', 'status']  # success, failure
        )

        self.enhanced_layers = Counter(
            'eav_enhanced_layers_total',
            'Attention layer evaluations that took an enhancement path',
            ['strategy']
        )

        self.block_duration = Histogram(
            'eav_block_duration_seconds',
            'Wall time of one attention block',
            ['layout'],
            buckets=[1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1]
        )

        self.run_duration = Histogram(
            'eav_run_duration_seconds',
            'Wall time of a full denoising run',
            buckets=[0.01, 0.1, 0.5, 1, 5, 10, 60]
        )

        self.last_cfi_enhanced = Gauge(
            'eav_last_cfi_enhanced',
            'Most recent CFI_enhanced per layer',
            ['layer']
        )

        self.last_run_timestamp = Gauge(
            'eav_last_run_timestamp_seconds',
            'Timestamp of the last run'
        )

    def serve(self, port: int) -> bool:
        """Start the Prometheus HTTP server once; returns False if the port is taken."""
        if self._server_port is not None:
            return True
        try:
            start_http_server(port)
            self._server_port = port
            logger.info("Metrics server started on port %d", port)
            return True
        except OSError:
            logger.warning("Metrics port %d likely already in use. Skipping start.", port)
            return False

    def record_run(self, strategy: str, status: str, duration: float):
        self.runs.labels(strategy=strategy, status=status).inc()
        self.run_duration.observe(duration)
        self.last_run_timestamp.set(time.time())

    def record_block(self, layout: str, layer: int, strategy: str, enhanced: bool,
                     cfi_enhanced: float, duration: float):
        self.block_duration.labels(layout=layout).observe(duration)
        self.last_cfi_enhanced.labels(layer=str(layer)).set(cfi_enhanced)
        if enhanced:
            self.enhanced_layers.labels(strategy=strategy).inc()
