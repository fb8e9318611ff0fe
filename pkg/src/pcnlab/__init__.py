"""pcnlab: a discriminative predictive-coding network laboratory.

Trains small PCNs under deterministic, Langevin, and MCPC regimes,
evaluates the K-way energy probe against the softmax-margin baseline with
Type-2 metrics, and audits the energy-margin decomposition empirically.
"""

__version__ = "0.1.0"
