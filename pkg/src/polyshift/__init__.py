"""Adaptive polyphase sampling, its anti-aliased relatives and the harnesses that measure them."""

__version__ = '0.1.0'


class PolyshiftError(Exception):
    pass
