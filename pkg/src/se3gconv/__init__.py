"""Separable SE(3) group convolutions for volumetric data, in numpy.

Modules: ``rotations`` (unit quaternions), ``grids`` (SO(3) grids), ``rbf``
(continuous group kernels), ``volume`` (resampling, correlation, file format),
``gconv`` (layers), ``model``/``train``/``data``/``checkpoint`` (networks),
``harness`` (equivariance measurements) and ``cli``.
"""

__version__ = "0.1.0"
