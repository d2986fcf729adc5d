"""Federated-learning robustness simulator.

Backdoor-attack families with hiding modes, seven aggregation rules
including a softmax-probe update screen, and a deterministic in-process
federation loop with CSV/JSON outputs.
"""

__version__ = "0.1.0"
