# Core package for the FL-DEFEND simulator

"""
Federated-learning security simulator.

Trains a small dense classifier across simulated clients, lets a share of
them mount targeted label-flipping attacks, and aggregates with either a
baseline robust aggregator or the DEFEND pipeline (magnitude-based goal
identification, GMM filtering, validation rollback, rating exclusion).
"""

__version__ = "0.3.0"
