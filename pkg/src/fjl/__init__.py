"""Federated joint learning for robot-guided rehabilitation exercises.

Subpackages and modules:

- :mod:`fjl.tensor` reverse-mode autodiff over numpy arrays
- :mod:`fjl.model` LSTM / transformer trajectory models
- :mod:`fjl.objectives` MSE, PCK, Spearman and the relational loss
- :mod:`fjl.kinematics`, :mod:`fjl.datagen` the 12-joint arm and synthetic data
- :mod:`fjl.federation` FedAvg protocol, coordinator and clients
- :mod:`fjl.cli` the ``fjl`` command
"""

__version__ = "0.1.0"
