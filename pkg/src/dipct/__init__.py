"""CT reconstruction with classical methods and deep image priors."""

__version__ = "0.1.0"
