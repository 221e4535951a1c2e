"""Statistical-CSI hybrid mmWave MIMO-NOMA downlink simulation.

Pipeline: channel synthesis -> covariance-based user grouping -> hybrid
(analog + digital) beamforming -> max-min fair power allocation.
"""

__version__ = "0.1.0"
