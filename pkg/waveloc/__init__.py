"""WaveLoc - end-to-end binaural sound localisation from raw waveforms.

This package provides the signal processing, network engine, binaural room
simulator and experiment harness used to train and evaluate azimuth
classifiers on two-channel 16 kHz audio.
"""

__version__ = "0.1.0"
