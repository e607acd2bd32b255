"""Client instrumentation library for the aide telemetry server."""

from .client import AideClient, TraceBuilder, new_trace_id

__all__ = ["AideClient", "TraceBuilder", "new_trace_id"]
__version__ = "0.1.0"
