"""Learned spatiotemporal dynamics of 4D volumetric sequences and anomaly scoring.

Modules: ``tensor_ops`` (differentiable primitives), ``convlstm``, ``models``,
``optim`` (AMSGrad and training), ``baselines`` (spline estimators), ``data``,
``scorers``, ``stats``, ``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
