"""
Spectral top-N recommendation: propensity-weighted truncated SVD (PSGE),
PureSVD, SGMC and EASE baselines, a graph-convolution analysis lab and the
data/evaluation pipeline around them.
"""

__version__ = "0.1.0"
