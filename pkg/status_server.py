"""
Status endpoints for a running simulation.
Serves health, a JSON status snapshot and Prometheus metrics over aiohttp.
"""

import time
from typing import Callable, Optional

import structlog
from aiohttp import web
from aiohttp.web import Request, Response

from monitoring import METRICS_CONTENT_TYPE, HarnessMetrics, get_harness_metrics

logger = structlog.get_logger(__name__)


class StatusServer:
    """HTTP server exposing the live harness metrics"""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 8080,
        metrics_provider: Callable[[], Optional[HarnessMetrics]] = get_harness_metrics,
    ):
        self.host = host
        self.port = port
        self.metrics_provider = metrics_provider
        self.app = web.Application()
        self.runner: Optional[web.AppRunner] = None
        self.site: Optional[web.TCPSite] = None
        self.start_time = time.monotonic()
        self.setup_routes()

    def setup_routes(self) -> None:
        self.app.router.add_get("/health", self.health_check)
        self.app.router.add_get("/health/live", self.liveness_check)
        self.app.router.add_get("/status", self.simulation_status)
        self.app.router.add_get("/metrics", self.prometheus_metrics)

    async def health_check(self, request: Request) -> Response:
        metrics = self.metrics_provider()
        return web.json_response(
            {
                "status": "running" if metrics is not None else "idle",
                "uptime": time.monotonic() - self.start_time,
            }
        )

    async def liveness_check(self, request: Request) -> Response:
        """Liveness check"""
        return web.json_response({"alive": True})

    async def simulation_status(self, request: Request) -> Response:
        metrics = self.metrics_provider()
        if metrics is None:
            return web.json_response({"status": "idle"}, status=503)
        return web.json_response({"status": "running", **metrics.snapshot()})

    async def prometheus_metrics(self, request: Request) -> Response:
        metrics = self.metrics_provider()
        if metrics is None:
            return Response(text="# no simulation running\n", content_type="text/plain")
        return Response(body=metrics.get_prometheus_metrics(), headers={"Content-Type": METRICS_CONTENT_TYPE})

    async def start(self) -> None:
        try:
            self.runner = web.AppRunner(self.app)
            await self.runner.setup()
            self.site = web.TCPSite(self.runner, self.host, self.port)
            await self.site.start()
            logger.info("status_server_started", host=self.host, port=self.port)
        except Exception as e:
            logger.error("status_server_start_failed", error=str(e))
            raise

    async def stop(self) -> None:
        try:
            if self.site:
                await self.site.stop()
            if self.runner:
                await self.runner.cleanup()
            logger.info("status_server_stopped")
        except Exception as e:
            logger.error("status_server_stop_failed", error=str(e))
