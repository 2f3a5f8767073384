"""
graphlower: a two-level neural-network graph compiler with an interpreter
backend and a multi-device inference runtime.
"""

__version__ = "0.1.0"
