# Pose the mini body, render a synthetic IUV map, and derive visibility two ways:
# from nearest-UV pixel correspondences and from a z-buffer.
import numpy as np

from visfit.body_model import forward
from visfit.mini_model import make_mini_model
from visfit.synth import DEFAULT_CAMERA, UPRIGHT, fit_crop
from visfit.visibility import (
    occlusion_labels_from_raster, occlusion_labels_from_uv, pixel_to_vertex, rasterize_zbuffer, synth_iuv,
)

model = make_mini_model()
print(f"mini model: {model.n_vertices} vertices, {len(model.faces)} faces, {model.n_kin} kinematic joints")

rng = np.random.default_rng(3)
theta = rng.normal(0, 0.35, (model.n_kin, 3))
theta[0] = UPRIGHT + [0.0, 0.6, 0.0]  # turned a little to the side
V = forward(model, theta, np.zeros(model.n_betas)).vertices + [0.0, 0.0, 4.0]
crop = fit_crop(DEFAULT_CAMERA, V)

raster = rasterize_zbuffer(V, model.faces, DEFAULT_CAMERA, crop, 128)
iuv = synth_iuv(V, model, DEFAULT_CAMERA, crop, 128, raster=raster)
print("foreground pixels:", int((iuv.part > 0).sum()), "of", iuv.part.size)

corr = pixel_to_vertex(iuv, model)
sz_uv = occlusion_labels_from_uv(corr, model.n_vertices)
sz_z = occlusion_labels_from_raster(model.faces, raster)
print(f"visible by UV: {sz_uv.mean():.1%}   by z-buffer: {sz_z.mean():.1%}")
print(f"agreement: {np.mean(sz_uv == sz_z):.2%}")

# which parts does the camera mostly see?
for p in np.unique(model.part_labels):
    mask = model.part_labels == p
    print(f"  part {p}: {sz_uv[mask].mean():.0%} visible")
