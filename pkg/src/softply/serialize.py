"""Dict <-> dataclass converters for the domain specs (JSON boundaries).

Angles are degrees in serialized form and radians in memory; camera poses
serialize as a 9-element rotation plus translation.
"""

from __future__ import annotations

import math

import numpy as np

from softply.geometry import AxisSpec, PoseGridSpec, RigidTransform
from softply.plysim import GraspConfig, PlyMaterialSpec
from softply.preprocess import CropRect, PreprocessSpec
from softply.render import CameraModel


def grid_to_dict(grid: PoseGridSpec) -> dict:
    def trans(a: AxisSpec):
        return {"center": a.center, "half_range": a.half_range, "step": a.step}

    def rot(a: AxisSpec):
        return {"center_deg": math.degrees(a.center),
                "half_range_deg": math.degrees(a.half_range),
                "step_deg": math.degrees(a.step)}

    return {"x": trans(grid.x), "y": trans(grid.y), "z": trans(grid.z),
            "theta": rot(grid.theta), "gamma": rot(grid.gamma)}


def grid_from_dict(obj: dict) -> PoseGridSpec:
    def trans(d):
        return AxisSpec(d["center"], d["half_range"], d["step"])

    def rot(d):
        return AxisSpec(math.radians(d["center_deg"]),
                        math.radians(d["half_range_deg"]),
                        math.radians(d["step_deg"]))

    return PoseGridSpec(x=trans(obj["x"]), y=trans(obj["y"]), z=trans(obj["z"]),
                        theta=rot(obj["theta"]), gamma=rot(obj["gamma"]))


def material_to_dict(mat: PlyMaterialSpec) -> dict:
    return {"width": mat.width, "length": mat.length,
            "grid_nu": mat.grid_nu, "grid_nv": mat.grid_nv,
            "areal_density": mat.areal_density,
            "spring_stiffness": mat.spring_stiffness,
            "shear_stiffness": mat.shear_stiffness}


def material_from_dict(obj: dict) -> PlyMaterialSpec:
    return PlyMaterialSpec(**obj)


def grasps_to_list(grasps) -> list:
    return [{"id": g.id, "clip_left": g.clip_left_offset,
             "clip_right": g.clip_right_offset} for g in grasps]


def grasps_from_list(items) -> tuple[GraspConfig, ...]:
    return tuple(GraspConfig(g["id"], g["clip_left"], g["clip_right"])
                 for g in items)


def camera_to_dict(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "z_near": cam.z_near, "z_far": cam.z_far,
            "rotation": cam.pose.rotation.ravel().tolist(),
            "translation": cam.pose.translation.tolist()}


def camera_from_dict(obj: dict) -> CameraModel:
    pose = RigidTransform(np.array(obj["rotation"]).reshape(3, 3),
                          np.array(obj["translation"]))
    return CameraModel(fx=obj["fx"], fy=obj["fy"], cx=obj["cx"], cy=obj["cy"],
                       width=obj["width"], height=obj["height"], pose=pose,
                       z_near=obj["z_near"], z_far=obj["z_far"])


def preprocess_to_dict(spec: PreprocessSpec) -> dict:
    return {"z_min": spec.z_min, "z_max": spec.z_max,
            "line_offset": spec.line_offset,
            "crop": [spec.crop.x0, spec.crop.y0, spec.crop.width, spec.crop.height],
            "out_size": spec.out_size}


def preprocess_from_dict(obj: dict) -> PreprocessSpec:
    x0, y0, w, h = obj["crop"]
    return PreprocessSpec(z_min=obj["z_min"], z_max=obj["z_max"],
                          line_offset=obj["line_offset"],
                          crop=CropRect(x0, y0, w, h), out_size=obj["out_size"])
