"""Regression calibration for exposures measured with error in Cox models.

Simulation of cohorts with self-reported and biomarker exposures, the six
estimation strategies compared in the Monte-Carlo study, and the
calibration / reliability tables used to describe a cohort.
"""

__version__ = "0.1.0"
