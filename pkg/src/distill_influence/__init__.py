"""Knowledge distillation with student-feedback teacher training."""
__version__ = "0.1.0"
