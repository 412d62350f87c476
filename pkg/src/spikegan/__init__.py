"""Spiking generative adversarial networks on a small numpy autodiff engine.

Modules: :mod:`tensor` (autodiff), :mod:`snn` (LIF neurons),
:mod:`decoding` (temporal decoders), :mod:`models`, :mod:`training`,
:mod:`data`, :mod:`metrics`, :mod:`cli`.
"""

__version__ = "0.1.0"
