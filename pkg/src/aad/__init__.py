"""
aad - Agitation and aggression detection from wristband physiology.
"""

__version__ = "0.1.0"
