"""Graph-attention neural-ODE forecaster with multi-path feature fusion.

Submodules: ``diffcore`` (reverse-mode autodiff), ``odesolve``, ``graph``,
``model``, ``ingest``, ``features``, ``selection``, ``train``, ``metrics``,
``explain``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
