"""trackcalib: absolute 3D running kinematics from 2D joints and lane segments.

Pipeline: generate (synthetic ground truth) -> register (partial track
registration, one calibration family per frame, sequence-consistent
resolution) -> lift (ray-cast 2D skeletons into world coordinates) ->
evaluate (re-projection / 3D / knee-angle / calibration metrics).
"""

__version__ = "0.1.0"
