"""Actor-critic recommendation with explicit user-item state representations.

Modules: numkit (autodiff + Adam), datasets, pmf (embeddings and simulator),
staterep, agent, replay, envloop (training and evaluation loops), baselines
and cli.
"""

__version__ = "0.1.0"
