"""Versioned on-disk formats: sequence bundles and pipeline outputs.

A sequence bundle is a directory with a ``manifest.json`` plus
``records.jsonl`` holding one frame per line (lanes, 2D skeleton,
optional ground truth).  All lengths are meters, angles degrees, pixel
coordinates image coordinates; field names are frozen in
docs/formats.md.  Writers are atomic (temp file + rename) and the
manifest carries a sha256 of the records so readers can reject
inconsistent bundles.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraCalibration, Extrinsics, Intrinsics
from .registration import LaneObservation, LaneSegment, SequenceCalibration, TrackModel
from .skeleton import JOINTS, Skeleton2D, Skeleton3D

FORMAT_VERSION = 1


class FormatError(Exception):
    """Unreadable, unversioned, or inconsistent files."""


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def calibration_to_dict(cal: CameraCalibration) -> dict:
    ext = cal.extrinsics
    return {
        "azimuth_deg": ext.azimuth_deg,
        "elevation_deg": ext.elevation_deg,
        "roll_deg": ext.roll_deg,
        "center": [float(v) for v in ext.camera_center],
        "hfov_deg": cal.intrinsics.hfov_deg,
        "width": cal.intrinsics.image_width,
        "height": cal.intrinsics.image_height,
    }


def calibration_from_dict(d: dict) -> CameraCalibration:
    return CameraCalibration(
        Intrinsics(int(d["width"]), int(d["height"]), float(d["hfov_deg"])),
        Extrinsics(
            float(d["azimuth_deg"]),
            float(d["elevation_deg"]),
            float(d["roll_deg"]),
            np.array(d["center"], dtype=float),
        ),
    )


def _frame_record(frame) -> dict:
    rec = {
        "frame": frame.frame_id,
        "lanes": [
            {"a": [float(s.a[0]), float(s.a[1])], "b": [float(s.b[0]), float(s.b[1])], "lane": s.lane_index}
            for s in frame.lanes_obs.segments
        ],
        "skel2d": [
            [float(u), float(v), float(c)]
            for (u, v), c in zip(frame.skeleton2d_obs.points, frame.skeleton2d_obs.confidence)
        ],
        "truth": {
            "skel3d": [[float(x) for x in p] for p in frame.skeleton3d.points],
            "calib": calibration_to_dict(frame.calibration),
            "contact": {
                "state": frame.contact_state,
                "left": None if frame.left_pin is None else [float(v) for v in frame.left_pin],
                "right": None if frame.right_pin is None else [float(v) for v in frame.right_pin],
            },
        },
    }
    return rec


def write_bundle(scene, out_dir) -> Path:
    """Write one SceneTruth as a bundle directory; returns its path."""
    out = Path(out_dir) / scene.name
    records = "\n".join(json.dumps(_frame_record(f)) for f in scene.frames) + "\n"
    rec_path = out / "records.jsonl"
    _atomic_write(rec_path, records)
    manifest = {
        "format_version": FORMAT_VERSION,
        "name": scene.name,
        "seed": scene.seed,
        "fps": scene.fps,
        "n_frames": scene.n_frames,
        "image": {"width": scene.image_width, "height": scene.image_height},
        "track": {"lane_width_m": scene.track.lane_width, "num_lanes": scene.track.num_lanes},
        "noise": None
        if scene.noise is None
        else {"sigma_joint_px": scene.noise.sigma_joint_px, "sigma_lane_px": scene.noise.sigma_lane_px},
        "distortion": None if scene.distortion is None else list(scene.distortion),
        "has_truth": True,
        "records_sha256": _sha256(rec_path),
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2) + "\n")
    return out


def write_dataset(scenes: list, out_dir, spec_dict: dict | None = None) -> Path:
    out = Path(out_dir)
    entries = []
    for scene in scenes:
        write_bundle(scene, out)
        entries.append({"name": scene.name, "n_frames": scene.n_frames, "seed": scene.seed})
    manifest = {
        "format_version": FORMAT_VERSION,
        "sequences": entries,
        "spec": spec_dict,
    }
    _atomic_write(out / "dataset_manifest.json", json.dumps(manifest, indent=2) + "\n")
    return out


@dataclass(eq=False)
class Bundle:
    """In-memory view of one sequence bundle."""

    path: Path
    manifest: dict
    lanes: list
    skel2d: list
    truth_skel3d: list | None
    truth_cals: list | None
    truth_contacts: list | None

    @property
    def fps(self) -> float:
        return float(self.manifest["fps"])

    @property
    def image_size(self) -> tuple[int, int]:
        img = self.manifest["image"]
        return int(img["width"]), int(img["height"])

    @property
    def track(self) -> TrackModel:
        t = self.manifest["track"]
        return TrackModel(float(t["lane_width_m"]), int(t["num_lanes"]))

    @property
    def distortion(self) -> tuple | None:
        d = self.manifest.get("distortion")
        return None if d is None else tuple(d)


def _check_version(data: dict, where: str) -> None:
    v = data.get("format_version")
    if v != FORMAT_VERSION:
        raise FormatError(f"{where}: unsupported format version {v!r} (expected {FORMAT_VERSION})")


def load_bundle(seq_dir, verify_checksum: bool = True) -> Bundle:
    seq_dir = Path(seq_dir)
    man_path = seq_dir / "manifest.json"
    rec_path = seq_dir / "records.jsonl"
    if not man_path.exists():
        raise FileNotFoundError(f"missing manifest: {man_path}")
    if not rec_path.exists():
        raise FileNotFoundError(f"missing records: {rec_path}")
    manifest = json.loads(man_path.read_text())
    _check_version(manifest, str(man_path))
    if verify_checksum and manifest.get("records_sha256") != _sha256(rec_path):
        raise FormatError(f"{rec_path}: sha256 mismatch against the manifest")
    lanes, skel2d = [], []
    truth3d, cals, contacts = [], [], []
    has_truth = False
    expected = 0
    for lineno, line in enumerate(rec_path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{rec_path}:{lineno}: invalid JSON: {exc.msg}") from exc
        frame = int(rec["frame"])
        if frame != expected:
            raise FormatError(f"{rec_path}:{lineno}: frame ids must be contiguous from 0 (got {frame})")
        expected += 1
        segs = tuple(
            LaneSegment(np.array(s["a"], float), np.array(s["b"], float), int(s["lane"]))
            for s in rec["lanes"]
        )
        lanes.append(LaneObservation(frame, segs))
        joints = np.array(rec["skel2d"], dtype=float)
        if joints.shape != (len(JOINTS), 3):
            raise FormatError(f"{rec_path}:{lineno}: skel2d must be {len(JOINTS)}x3")
        skel2d.append(Skeleton2D(frame, joints[:, :2], joints[:, 2]))
        tr = rec.get("truth")
        if tr is not None:
            has_truth = True
            truth3d.append(Skeleton3D(frame, np.array(tr["skel3d"], dtype=float)))
            cals.append(calibration_from_dict(tr["calib"]))
            contacts.append(tr["contact"])
    if expected != int(manifest["n_frames"]):
        raise FormatError(
            f"{rec_path}: {expected} records but manifest declares {manifest['n_frames']}"
        )
    return Bundle(
        path=seq_dir,
        manifest=manifest,
        lanes=lanes,
        skel2d=skel2d,
        truth_skel3d=truth3d if has_truth else None,
        truth_cals=cals if has_truth else None,
        truth_contacts=contacts if has_truth else None,
    )


def list_dataset(root) -> list:
    """Paths of the sequence bundles under a dataset directory."""
    root = Path(root)
    man = root / "dataset_manifest.json"
    if man.exists():
        data = json.loads(man.read_text())
        _check_version(data, str(man))
        return [root / e["name"] for e in data["sequences"]]
    if (root / "manifest.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/manifest.json"))


# ---------------------------------------------------------------------------
# pipeline outputs


def write_calibrations(seq_dir, seqcal: SequenceCalibration, report: dict) -> Path:
    seq_dir = Path(seq_dir)
    lines = []
    for fid, cal in zip(seqcal.frame_ids, seqcal.calibrations):
        lines.append(json.dumps({"frame": fid, "calib": calibration_to_dict(cal)}))
    path = seq_dir / "calib_est.jsonl"
    _atomic_write(path, "\n".join(lines) + "\n")
    payload = {
        "format_version": FORMAT_VERSION,
        "shared_height_m": seqcal.shared_height,
        "position_std_m": seqcal.position_std_m,
        "position_spread_m": seqcal.position_spread_m,
        "objective": seqcal.objective,
    }
    payload.update(report)
    _atomic_write(seq_dir / "register_report.json", json.dumps(payload, indent=2) + "\n")
    return path


def load_calibrations(seq_dir) -> dict:
    """frame_id -> CameraCalibration from a calib_est.jsonl."""
    path = Path(seq_dir) / "calib_est.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing calibration file: {path}")
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out[int(rec["frame"])] = calibration_from_dict(rec["calib"])
    return out


def write_skeletons(seq_dir, skeletons: list, report: dict) -> Path:
    seq_dir = Path(seq_dir)
    lines = []
    for sk in skeletons:
        if sk is None:
            continue
        lines.append(
            json.dumps({"frame": sk.frame_id, "skel3d": [[float(x) for x in p] for p in sk.points]})
        )
    path = seq_dir / "skel3d_est.jsonl"
    _atomic_write(path, "\n".join(lines) + "\n")
    payload = {"format_version": FORMAT_VERSION}
    payload.update(report)
    _atomic_write(seq_dir / "lift_report.json", json.dumps(payload, indent=2) + "\n")
    return path


def load_skeletons(seq_dir) -> dict:
    path = Path(seq_dir) / "skel3d_est.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing skeleton file: {path}")
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out[int(rec["frame"])] = Skeleton3D(int(rec["frame"]), np.array(rec["skel3d"], float))
    return out
