"""Event-triggered port structure monitoring: edge node, wire layer and cloud ingest, on a simulated port."""

__version__ = "0.1.0"
