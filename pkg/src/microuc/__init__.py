"""microuc: two-stage unit commitment and dispatch for islanded feeder microgrids.

Subpackages cover the cold-load-pickup model pipeline (clpu), the MILP layer
(milp), switchable-topology handling (topology), the 24-hour-ahead commitment
stage (stage1), the 5-minute dispatch stage (stage2), the minute-resolution
feeder simulator (simulator), and scenario generation / the rolling driver
(scenario).
"""

__version__ = "0.1.0"
