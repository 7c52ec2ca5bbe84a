"""Pose-stream vehicle failure detection at desk scale.

Subpackages are imported lazily on purpose: the command line entry point
pins BLAS thread counts before numpy loads, which only works if importing
``failurenet`` itself stays cheap.
"""

__version__ = "0.1.0"
