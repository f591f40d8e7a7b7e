"""Learned control-affine dynamics with worst-case uncertainty bounds, CLF and
kNN nominal policies, and a robust CBF-QP safety filter that keeps a
velocity-controlled agent out of spatial no-go zones and inside the
demonstrated task space, validated in a bundled kinematic simulator."""

__version__ = "0.1.0"
