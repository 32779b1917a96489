"""mkplan: offline schedule planning for persistent-kernel software pipelines.

Lowers a decoder-layer operator graph to micro-ops, builds the dependency
DAG, searches page-constrained schedule candidates with a deterministic
pipeline simulator, and solidifies the winner into a replayable trace file.
"""

__version__ = "0.1.0"
