"""Defect-aware federated training of an LSTM load forecaster, with an
auto-encoder that embeds and quality-scores uploaded models and a soft
actor-critic agent that learns the aggregation weights."""

__version__ = "0.1.0"
