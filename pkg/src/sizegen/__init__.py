"""Size-generalizable power and bandwidth allocation.

Library layout:

* autodiff    - float64 reverse-mode tape, dense layers, schedules, SGD/Adam
* penn        - permutation-equivariant networks and output heads
* closed_form - exact solvers for the convex allocation problems
* wmmse       - interference-channel power control and its statistics
* urllc       - physical/QoS model: channels, rates, effective capacity
* scaling     - bandwidth scale factor: boundary labels and the fitted net
* size_checks - empirical size-invariance and concentration checks
* training    - primal-dual trainer, baselines, dataset generation, metrics
* config/cli  - experiment configuration and the command line
"""

__version__ = "0.1.0"
