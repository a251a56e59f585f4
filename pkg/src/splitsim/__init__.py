"""Desk-scale split federated learning simulator.

Subpackages by concern: ``nn_core`` (dense-net kernel), ``split_models``
(architecture splitting and serialization), ``protocol`` (round
transitions), ``sysopt`` (cost model and resource optimizer), ``simnet``
(profiles, clock, accounting), ``data`` (datasets and partitioning), and
``harness`` (experiment runner and CLI backend).
"""

from . import data, harness, nn_core, protocol, simnet, split_models, sysopt  # noqa: F401

__version__ = "0.1.0"
