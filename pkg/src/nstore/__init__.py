"""nstore: streaming biosignal persistence with relational metadata.

Layers, bottom up: wire (framing), broker (durable partitioned queue),
persist (stream logs + BDF export), store (five-topic metadata with WAL
replication), query (HTTP read API), bench (load harness), runtime
(config + node lifecycle).
"""

__version__ = "0.1.0"
