"""castgraph: human-in-the-loop character relationship graphs.

Consensus extraction over a pluggable text-generation provider, a
rule-based completion and conflict-checking engine, evidence-grounded
conflict resolution, scoring and small-world graph statistics, plus an
annotation HTTP service and a batch CLI.
"""

__version__ = "0.1.0"
