"""Centralized collaborative visual SLAM on simulated agents.

Agents stream keyframes to a server over a chunked binary protocol; the
server detects overlaps with a bag-of-words index, verifies them
geometrically, fuses submaps with a pose graph and pushes drift
corrections back to the agents.
"""

__version__ = "0.1.0"
