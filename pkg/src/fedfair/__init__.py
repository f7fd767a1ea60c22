"""fedfair: a deterministic federated-learning simulator for studying how
privacy risk from source inference attacks distributes across clients,
and two defenses: curvature-gated Lipschitz regularization on clients and
risk-aware aggregation on the server.
"""

__version__ = "0.1.0"

from fedfair.backend import active_backend, available_backends, use_backend

__all__ = ["active_backend", "available_backends", "use_backend", "__version__"]
