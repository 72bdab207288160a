"""
Camera geometry: crops, projection and the capsule camera
=========================================================

Crop-aware intrinsics, projection and unprojection, azimuth rotation of a
pose, and the camera recovered from a capsule whose pelvis lands at the
image origin.
"""
import numpy as np

from epochpose.camera import (CameraIntrinsics, CropGeometry, camera_depths, extrinsics_from_capsule,
                              intrinsics_from_crop, inverse_rotate_azimuth, project,
                              rotate_azimuth, unproject)
from epochpose.data import SyntheticConfig, generate

# a 500 px box cut from a 1000 x 1000 frame and resized to 224 px
K = intrinsics_from_crop(CropGeometry(1000, 1000, 100, 0, 500, 500, 224, 224, 1.0))
print(f"s_w={K.s_w:.3f} f_w={K.f_w:.4f} c_w={K.c_w:.3f}")

ds = generate(SyntheticConfig(count=5, seed=0))
Ks, Es = ds.cameras()
x = project(ds.y_gt, Ks, Es)
y = unproject(x, camera_depths(ds.y_gt, Es), Ks, Es)
print("unprojection error (mm):", np.abs(y - ds.y_gt).max())

# rotating about the vertical axis and back is exact
theta = np.full(5, 0.7)
back = inverse_rotate_azimuth(rotate_azimuth(ds.y_gt, theta), theta)
print("rotation roundtrip error (mm):", np.abs(back - ds.y_gt).max())

# a capsule (tx, ty, distance) per joint defines a camera that looks at the pelvis
gamma = np.tile([0.1, 0.4, 4000.0], (17, 1))
Kc = CameraIntrinsics(1000.0, 1000.0)
E = extrinsics_from_capsule(gamma, Kc)
print("pelvis image position:", project(np.zeros((1, 3)), Kc, E)[0])
