"""Multi-task asynchronous federated learning over wireless edge devices.

Modules:

* :mod:`mafl.core` -- scenario types, validation, datasets, partitioning
* :mod:`mafl.training` -- local SGD and server aggregation
* :mod:`mafl.scheduling` -- reception/upload matrices and schedule tensors
* :mod:`mafl.wireless` -- link rates, delays, energies, local periods
* :mod:`mafl.bound` -- convergence bound and its checks
* :mod:`mafl.sca` -- relaxed joint optimization and rounding
* :mod:`mafl.simulator` -- discrete-event execution and baselines
* :mod:`mafl.cli` -- command-line entry point
"""

__version__ = "0.1.0"
