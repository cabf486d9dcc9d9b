"""Inverse reinforcement learning of market dynamics.

Modules:

* ``model_core``: state, action, reward and transition of the portfolio model.
* ``entropy_rl``: entropy-regularized value functions and Gaussian policies.
* ``irl_engine``: variational free energy and EM fitting.
* ``gmr``: geometric mean reversion simulation and calibration.
* ``signals_data``: market-cap panels and predictive signals.
"""
__version__ = "0.1.0"
