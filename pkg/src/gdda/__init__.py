"""Semantic OOD detection on graphs under covariate shift.

Two phases: disentangle GIN representations into semantic and style
factors, then sample shifted factors with an attenuated-score VP-SDE to
build pseudo-InD / pseudo-OOD sets for an energy-margin detector.
"""

__version__ = "0.1.0"
