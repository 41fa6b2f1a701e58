"""Rotated-box overlap in bird's-eye view and in 3D."""

import math

from pseudofuse.geometry import Box7, bev_iou, iou_3d

a = Box7(0.0, 0.0, 0.8, 4.5, 1.9, 1.6, 0.0)
for yaw in (0.0, math.pi / 8, math.pi / 4, math.pi / 2):
    b = Box7(0.5, 0.2, 1.0, 4.5, 1.9, 1.6, yaw)
    print(f"yaw {math.degrees(yaw):5.1f} deg  BEV IoU {bev_iou(a, b):.3f}  3D IoU {iou_3d(a, b):.3f}")
