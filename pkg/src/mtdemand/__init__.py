"""Multi-task demand estimation under endogenous prices.

Submodules: ``core`` (demand model, worlds, panels), ``infoset`` (information
sets and supervision), ``classic`` (OLS and empirical Bayes), ``learners``
(linear and MLP meta-learners), ``theory`` (identification checks),
``retail`` (transaction pipeline), ``bench`` and ``cli``.
"""

from .core import DemandParams, GenConfig, TaskPanel, World, generate
from .infoset import Design, build_info_set

__all__ = ["DemandParams", "GenConfig", "TaskPanel", "World", "generate", "Design",
           "build_info_set"]
__version__ = "0.1.0"
