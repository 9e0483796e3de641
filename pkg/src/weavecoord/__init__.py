"""weavecoord: priority coordination from trajectory weaving.

The package bundles four desk-scale pieces that fit together:

* ``weaving`` / ``priority_graph``: turn logged multi-agent trajectories into
  a directed priority graph and a per-agent scalar priority field.
* ``sim``: a kinematic multi-vehicle microsimulator with collision, speed and
  command-smoothness metrics.
* ``nets`` / ``losses`` / ``training``: a numpy actor-critic whose critic is
  conditioned on predicted leader actions, trained under centralized training
  with decentralized execution.
* ``tabular``: exact tabular verification of the value-error bound and the
  performance-difference identity that justify the critic construction.
"""

__version__ = "0.1.0"

from .weaving import Pose2, Trajectory, WeaveParams
from .priority_graph import DirectedEdge, FieldParams, PriorityGraph

__all__ = [
    "Pose2",
    "Trajectory",
    "WeaveParams",
    "DirectedEdge",
    "FieldParams",
    "PriorityGraph",
    "__version__",
]
