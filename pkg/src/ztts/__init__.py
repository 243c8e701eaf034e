"""Two-stage speech synthesis through a learned waveform latent.

A waveform autoencoder trained adversarially learns a per-frame latent
code; a flow-based acoustic model maps text to the distribution of that
code, so both stages share one representation space.
"""

__version__ = "0.1.0"
