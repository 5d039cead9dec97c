"""Learning-accelerated consensus ADMM for distributed DC optimal power flow."""

__version__ = "0.1.0"
