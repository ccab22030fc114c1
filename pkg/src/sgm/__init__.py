"""Structural-causal forecasting for tensor time series.

Modules: ``numerics`` (tape autodiff), ``data`` (CSV ingestion, splits),
``codec`` (feature autoencoder), ``dag_inner`` (per-timestamp DAG learning),
``granger_outer`` (DAG-conditioned DCGRU forecaster), ``anomaly``,
``evaluation`` (metrics, persistence, blending), ``experiment`` (harness),
``synthetic`` (ground-truth generators) and ``cli``.
"""

__version__ = "0.1.0"
