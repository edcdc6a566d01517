"""Voice-imitating text-to-speech at desk scale.

A speaker embedder network maps an arbitrary-length speech sample to a
fixed-size speaker embedding; a sequence-to-sequence spectrogram generator
conditioned on that embedding (or on a learned per-speaker lookup table)
synthesizes speech for new text. All numerics run on a small numpy-backed
autodiff engine.
"""

__version__ = "0.1.0"
