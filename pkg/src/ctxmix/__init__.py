"""Context-aware mixture-of-experts activity recognition.

A gate network routes fixed-length sensor windows to per-context expert
networks; the ensemble is trained by alternating gate/expert optimization
of a variational bound, initialized by clustering-based gate pretraining,
and wrapped with an entropy-regularized distribution over linear context
discriminants that supplies calibrated rejection of unknown contexts.
"""

__version__ = "0.1.0"
