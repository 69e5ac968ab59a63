"""
Simulated radar scenes and pillar projection
============================================

A scene is a handful of boxes moving around an ego vehicle that itself drives
and turns. Each frame is a list of (range, azimuth, doppler, amplitude)
returns plus the ground-truth boxes in the ego frame at that instant.
"""

import dataclasses

import numpy as np

from attentivegru.bev import GridSpec, PillarEncoder, pillar_project
from attentivegru.sim import CLASSES, SimConfig, generate_scene, render_sequence

cfg = dataclasses.replace(SimConfig(), n_frames=4)
scene = generate_scene(cfg, seed=7)
frames = render_sequence(scene)

# the ego vehicle moves and turns; the model never sees these numbers
ego = scene.ego[0]
print(f"ego speed {ego.speed:.1f} m/s, yaw rate {ego.yaw_rate:+.3f} rad/s")

for obj in scene.objects:
    print(f"{CLASSES[obj.class_id]:>10s}  size {obj.size[0]:.1f} x {obj.size[1]:.1f} m  {obj.dynamics}")

# returns per frame: object reflections plus clutter
for t, fr in enumerate(frames):
    from_objects = int((fr.owners >= 0).sum())
    print(f"frame {t}: {len(fr.points):3d} points ({from_objects} on objects), {len(fr.gt_boxes)} boxes")

# doppler of a stationary object is minus the ego speed projected on the line of sight
fr = frames[0]
print("doppler range [m/s]:", np.round(fr.points[:, 2].min(), 2), "to", np.round(fr.points[:, 2].max(), 2))

# pillar projection: every occupied range-azimuth cell gets the max over its points
spec = GridSpec()  # 32 x 32 cells over 64 m and 90 degrees
bev = pillar_project(fr, spec, PillarEncoder(np.random.default_rng(0), spec.c_in))
occupied = np.any(bev.values.data != 0, axis=0)
print(f"BEV map {bev.values.shape}, {occupied.sum()} of {occupied.size} cells occupied")
