"""Black-box safety validation and traceability tooling for ML components."""

__version__ = "0.1.0"
