"""Two-party distributed vertical federated learning.

Pipeline: private id intersection over garbled Bloom filters, aligned
vertical sharding, and bulk-synchronous split training where the passive
party's contribution to the interactive layer is computed under additively
homomorphic encryption.
"""

__version__ = "0.1.0"

from .config import RunConfig, load_config, parse_config_text
from .orchestrator import RunResult, evaluate, run_local, run_party
from .psi import distributed_psi, psi_pair

__all__ = [
    "RunConfig", "load_config", "parse_config_text",
    "RunResult", "evaluate", "run_local", "run_party",
    "distributed_psi", "psi_pair", "__version__",
]
