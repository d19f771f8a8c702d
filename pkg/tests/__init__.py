"""
FoxPy Test Package.

Test suite for the FoxPy web framework.
"""
