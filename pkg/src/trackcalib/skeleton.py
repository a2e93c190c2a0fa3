"""Joint set, 2D/3D skeleton containers, and limb-length estimation.

The joint set is the 17-joint Human3.6m-style convention: four torso
joints above the pelvis root plus six joints per body side.  Joints are
stored as fixed-order arrays; ``JOINTS`` defines the order everywhere
(files, metrics, lifting).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JOINTS = (
    "pelvis",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
)

PARENT = {
    "pelvis": None,
    "spine": "pelvis",
    "thorax": "spine",
    "neck": "thorax",
    "head": "neck",
    "left_shoulder": "neck",
    "left_elbow": "left_shoulder",
    "left_wrist": "left_elbow",
    "right_shoulder": "neck",
    "right_elbow": "right_shoulder",
    "right_wrist": "right_elbow",
    "left_hip": "pelvis",
    "left_knee": "left_hip",
    "left_ankle": "left_knee",
    "right_hip": "pelvis",
    "right_knee": "right_hip",
    "right_ankle": "right_knee",
}

JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}

# parent -> child edges in topological (construction) order
EDGES = tuple((PARENT[j], j) for j in JOINTS if PARENT[j] is not None)
EDGE_INDEX = {edge: i for i, edge in enumerate(EDGES)}

# three-edge limb segments built by 8-way candidate enumeration
LIMB_SEGMENTS = {
    "left_leg": ("left_hip", "left_knee", "left_ankle"),
    "right_leg": ("right_hip", "right_knee", "right_ankle"),
    "left_arm": ("left_shoulder", "left_elbow", "left_wrist"),
    "right_arm": ("right_shoulder", "right_elbow", "right_wrist"),
}

# torso joints are placed per edge, in this order
TORSO_CHAIN = ("spine", "thorax", "neck", "head")


@dataclass(eq=False)
class Skeleton2D:
    """Per-frame 2D joint detections: (17, 2) pixels + confidence in [0, 1].

    Confidence 0 marks a missing joint.
    """

    frame_id: int
    points: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(len(JOINTS), 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(len(JOINTS))

    def point(self, joint: str) -> np.ndarray:
        return self.points[JOINT_INDEX[joint]]

    def conf(self, joint: str) -> float:
        return float(self.confidence[JOINT_INDEX[joint]])


@dataclass(eq=False)
class Skeleton3D:
    """Per-frame absolute 3D joints: (17, 3) meters in the world frame."""

    frame_id: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(len(JOINTS), 3)

    def point(self, joint: str) -> np.ndarray:
        return self.points[JOINT_INDEX[joint]]

    def edge_lengths(self) -> np.ndarray:
        """Euclidean length of every parent->child edge, EDGES order."""
        out = np.empty(len(EDGES))
        for i, (p, c) in enumerate(EDGES):
            out[i] = np.linalg.norm(self.point(c) - self.point(p))
        return out


class MissingEdgeError(Exception):
    """An edge has no measurable length in any input skeleton."""


@dataclass(eq=False)
class LimbLengths:
    """Length per parent->child edge (EDGES order), meters, all positive.

    Left/right lengths may differ; no symmetry is imposed.
    """

    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=float).reshape(len(EDGES))
        if not np.all(self.lengths > 0):
            raise ValueError("all limb lengths must be positive")

    def of(self, parent: str, child: str) -> float:
        return float(self.lengths[EDGE_INDEX[(parent, child)]])

    @classmethod
    def from_dict(cls, mapping: dict) -> "LimbLengths":
        return cls(np.array([mapping[f"{p}->{c}"] for p, c in EDGES]))

    def to_dict(self) -> dict:
        return {f"{p}->{c}": float(v) for (p, c), v in zip(EDGES, self.lengths)}


def estimate_limb_lengths(skeletons: list) -> LimbLengths:
    """Per-edge arithmetic mean of frame-wise Euclidean lengths.

    NaN joint positions are ignored per frame; an edge with no finite
    length in any frame raises MissingEdgeError.
    """
    if not skeletons:
        raise MissingEdgeError("no input skeletons")
    per_frame = np.stack([sk.edge_lengths() for sk in skeletons])
    with np.errstate(invalid="ignore"):
        means = np.nanmean(per_frame, axis=0)
    missing = ~np.isfinite(means)
    if np.any(missing):
        bad = [f"{p}->{c}" for (p, c), m in zip(EDGES, missing) if m]
        raise MissingEdgeError(f"edges absent in every frame: {bad}")
    return LimbLengths(means)
