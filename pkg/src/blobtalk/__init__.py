"""blobtalk: audio-driven video diffusion at desk scale.

Flow-matching training and windowed inference for a small diffusion
transformer conditioned on audio, text tags, and reference frames, built
around a synthetic blob world with analytically measurable lip sync.
"""

__version__ = "0.1.0"
