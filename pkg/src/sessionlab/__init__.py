"""Session-level security log datasets, prevalence-aware benchmarking and desk-scale distillation."""

__version__ = "0.1.0"
