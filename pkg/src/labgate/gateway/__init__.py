from .normalize import normalize
from .pipeline import Pipeline
from .service import GatewayService, export_dead_letters, ingest_into, run_gateway

__all__ = ["normalize", "Pipeline", "GatewayService", "run_gateway", "ingest_into", "export_dead_letters"]
