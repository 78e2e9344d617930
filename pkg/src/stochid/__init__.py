"""Statistical inverse identification of random-field elasticity hyperparameters.

Pipeline: sample hyperparameters -> simulate observables on a plane-stress
random compliance field -> condition the database by kernel regression ->
train a feedforward surrogate -> identify hyperparameters from observations
and quantify robustness under input uncertainty.
"""

from ._version import __version__

__all__ = ["__version__"]
