"""JSON observation / calibration files and canonical serialisation."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .camera_model import CameraIntrinsics, CameraMeta
from .epipolar import Pose
from .errors import ParseError
from .wand import ObservationTable, WandGeometry

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# canonical JSON
# ---------------------------------------------------------------------------

def _encode(value, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(value[k], indent, level + 1)}"
                 for k in sorted(value, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(value, (list, tuple)):
        if not value:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in value):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in value) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in value) + "\n" + end + "]"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not math.isfinite(v):
            return "null"
        return format(v, ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, np.ndarray):
        return _encode(value.tolist(), indent, level)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """Deterministic JSON: sorted keys, floats with 17 significant digits, NaN as null."""
    return _encode(obj, indent, 0) + "\n"


def loads(text: str, source: str = "<string>"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}",
                         stage="parse") from exc


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}", stage="parse") from exc
    return loads(text, str(path))


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

def _require(mapping, key, where):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ParseError(f"{where}: missing key {key!r}", stage="parse")
    return mapping[key]


def _number(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ParseError(f"{where}: expected a finite number, got {value!r}", stage="parse")
    return float(value)


def _pixel(value, where):
    if value is None:
        return None
    if not isinstance(value, list) or len(value) != 2:
        raise ParseError(f"{where}: a pixel must be [u, v] or null", stage="parse")
    return [_number(v, where) for v in value]


def meta_to_dict(meta: CameraMeta) -> dict:
    return {
        "id": meta.id,
        "width": meta.width,
        "height": meta.height,
        "pixel_size_mm": list(meta.pixel_size),
        "nominal_focal_mm": meta.nominal_focal,
        # rounded so that a load/save cycle reproduces the file byte for byte
        "fov_deg": round(float(np.rad2deg(meta.fov)), 12),
        "model_hint": meta.model_hint,
    }


def meta_from_dict(d: dict, where="camera") -> CameraMeta:
    try:
        pitch = _require(d, "pixel_size_mm", where)
        if not isinstance(pitch, list) or len(pitch) != 2:
            raise ParseError(f"{where}: pixel_size_mm must hold two numbers", stage="parse")
        return CameraMeta(
            id=int(_require(d, "id", where)),
            width=int(_require(d, "width", where)),
            height=int(_require(d, "height", where)),
            pixel_size=(_number(pitch[0], where), _number(pitch[1], where)),
            nominal_focal=_number(_require(d, "nominal_focal_mm", where), where),
            fov=float(np.deg2rad(_number(_require(d, "fov_deg", where), where))),
            model_hint=d.get("model_hint", "auto"),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"{where}: {exc}", stage="parse") from exc


def wand_to_dict(wand: WandGeometry) -> dict:
    return {"L1_mm": wand.L1, "L2_mm": wand.L2, "L_mm": wand.L}


def wand_from_dict(d: dict) -> WandGeometry:
    return WandGeometry(*(_number(_require(d, k, "wand"), "wand") for k in ("L1_mm", "L2_mm", "L_mm")))


def observations_to_dict(metas: dict, wand: WandGeometry, table: ObservationTable) -> dict:
    frames = []
    for fi, fid in enumerate(table.frame_ids):
        dets = []
        for ci, cam in enumerate(table.camera_ids):
            pix = table.pixels[fi, ci]
            seen = np.all(np.isfinite(pix), axis=1)
            if not seen.any():
                continue
            det = {"camera": cam}
            for mi, name in enumerate("abc"):
                det[name] = [float(pix[mi, 0]), float(pix[mi, 1])] if seen[mi] else None
            dets.append(det)
        frames.append({"id": int(fid), "detections": dets})
    return {
        "schema_version": SCHEMA_VERSION,
        "cameras": [meta_to_dict(metas[c]) for c in sorted(metas)],
        "wand": wand_to_dict(wand),
        "frames": frames,
    }


def observations_from_dict(doc: dict):
    """Validate an observation document; returns (metas, wand, table)."""
    if not isinstance(doc, dict):
        raise ParseError("observation file must hold a JSON object", stage="parse")
    cams = _require(doc, "cameras", "observation file")
    if not isinstance(cams, list):
        raise ParseError("'cameras' must be a list", stage="parse")
    metas = {}
    for i, d in enumerate(cams):
        meta = meta_from_dict(d, f"cameras[{i}]")
        if meta.id in metas:
            raise ParseError(f"camera id {meta.id} appears twice", stage="parse")
        metas[meta.id] = meta
    wand = wand_from_dict(_require(doc, "wand", "observation file"))
    frames = _require(doc, "frames", "observation file")
    if not isinstance(frames, list):
        raise ParseError("'frames' must be a list", stage="parse")
    ids = sorted(metas)
    col = {c: i for i, c in enumerate(ids)}
    pixels = np.full((len(frames), len(ids), 3, 2), np.nan)
    frame_ids = []
    for fi, frame in enumerate(frames):
        where = f"frames[{fi}]"
        fid = _require(frame, "id", where)
        if not isinstance(fid, int) or isinstance(fid, bool):
            raise ParseError(f"{where}: frame id must be an integer", stage="parse")
        if frame_ids and fid <= frame_ids[-1]:
            raise ParseError(f"{where}: frame ids must be unique and ascending", stage="parse")
        frame_ids.append(fid)
        for di, det in enumerate(_require(frame, "detections", where)):
            dwhere = f"{where}.detections[{di}]"
            cam = _require(det, "camera", dwhere)
            if cam not in col:
                raise ParseError(f"{dwhere}: unknown camera {cam}", stage="parse")
            for mi, name in enumerate("abc"):
                p = _pixel(det.get(name), f"{dwhere}.{name}")
                if p is not None:
                    pixels[fi, col[cam], mi] = p
    return metas, wand, ObservationTable(frame_ids, ids, pixels)


def load_observations(path):
    return observations_from_dict(read_json(path))


def save_observations(path, metas, wand, table):
    write_json(path, observations_to_dict(metas, wand, table))


# ---------------------------------------------------------------------------
# calibration results
# ---------------------------------------------------------------------------

def intrinsics_to_dict(intr: CameraIntrinsics) -> dict:
    return {"k": [float(v) for v in intr.k], "mu": intr.mu, "mv": intr.mv, "u0": intr.u0, "v0": intr.v0}


def pose_to_dict(pose: Pose) -> dict:
    return {"rodrigues": [float(v) for v in pose.r], "t_mm": [float(v) for v in pose.t]}


def calibration_to_dict(reference: int, metas: dict, intrinsics: dict, poses: dict,
                        diagnostics: dict | None = None) -> dict:
    cams = []
    for c in sorted(intrinsics):
        cams.append({
            "id": c,
            "meta": meta_to_dict(metas[c]),
            "intrinsics": intrinsics_to_dict(intrinsics[c]),
            "pose": pose_to_dict(poses[c]),
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "reference": reference,
        "cameras": cams,
        "diagnostics": diagnostics or {},
    }


def result_to_dict(result, metas: dict, config: dict | None = None) -> dict:
    """Calibration document for a MultiCalibration result."""
    diagnostics = {
        "e_rms_px": {str(c): v for c, v in result.e_rms.items()},
        "d_rms_mm": result.d_rms,
        "frames_used": [int(f) for f in result.frames_used],
        "frames_rejected": [int(f) for f in result.frames_rejected],
        "paths": {str(c): [int(v) for v in p] for c, p in result.tree.paths.items()},
        "deviations": list(result.deviations),
        "config": config or {},
    }
    return calibration_to_dict(result.reference, metas, result.intrinsics, result.poses, diagnostics)


def calibration_from_dict(doc: dict):
    """Returns (reference, metas, intrinsics, poses, diagnostics)."""
    if not isinstance(doc, dict):
        raise ParseError("calibration file must hold a JSON object", stage="parse")
    version = _require(doc, "schema_version", "calibration file")
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported schema_version {version}", stage="parse")
    reference = int(_require(doc, "reference", "calibration file"))
    metas, intrinsics, poses = {}, {}, {}
    for i, cam in enumerate(_require(doc, "cameras", "calibration file")):
        where = f"cameras[{i}]"
        cid = int(_require(cam, "id", where))
        meta = meta_from_dict(_require(cam, "meta", where), where + ".meta")
        d = _require(cam, "intrinsics", where)
        k = [_number(v, where) for v in _require(d, "k", where)]
        if len(k) != 5:
            raise ParseError(f"{where}: k must hold five coefficients", stage="parse")
        intrinsics[cid] = CameraIntrinsics(k, *(_number(_require(d, n, where), where)
                                                for n in ("mu", "mv", "u0", "v0")),
                                           theta_max=meta.theta_max)
        p = _require(cam, "pose", where)
        poses[cid] = Pose([_number(v, where) for v in _require(p, "rodrigues", where)],
                          [_number(v, where) for v in _require(p, "t_mm", where)])
        metas[cid] = meta
    if reference not in intrinsics:
        raise ParseError(f"reference camera {reference} is not listed", stage="parse")
    return reference, metas, intrinsics, poses, doc.get("diagnostics", {})


def load_calibration(path):
    return calibration_from_dict(read_json(path))
