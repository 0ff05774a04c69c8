"""Adversarial patch attacks on miniature optical-flow networks.

Submodules: ``tensor`` (reverse-mode autodiff), ``models`` (FlowNetC/S minis),
``data`` (synthetic scenes and file formats), ``training``, ``patches`` and
``attacks``, ``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
