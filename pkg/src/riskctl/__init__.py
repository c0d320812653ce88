"""riskctl: neural two-step policies for multi-period risk-reward control.

Subpackages cover scenario simulation (``scenarios``), the controlled
recursion (``recursion``), risk-reward objectives (``objectives``), policy
networks and their gradients (``nets``, ``trainer``), the grid-based
reference solver (``reference``), and study orchestration (``experiments``).
"""

__version__ = "0.1.0"
