"""Complete RG trajectories between the Gaussian and the nontrivial fixed point."""

__version__ = "0.1.0"
