"""Follow-up phenotype prediction from a single baseline observation.

A population linear trend in age plus subject-specific deviations drawn from
Gaussian processes over genetic, clinical and baseline-image similarity.
"""

__version__ = "0.1.0"
