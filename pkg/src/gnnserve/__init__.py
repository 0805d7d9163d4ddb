"""Serving engine for GNN query-node embeddings over partitioned graphs.

The package computes embeddings for previously unseen query nodes that
arrive with edges into an existing, immutable training graph.  Two
mechanisms keep request latency bounded:

* reuse of per-layer node embeddings snapshotted after training, with a
  budgeted, policy-driven recomputation of the few neighbors whose stored
  embeddings would be most stale, and
* partition-parallel construction/execution of the layered computation
  graph, where each partition aggregates locally and partial aggregates
  are exchanged with all-to-all collectives and combined by merge
  functions specific to each aggregation kind.
"""

__version__ = "0.1.0"
