"""splatshape: capture deforming characters from multi-view frame grids with
deformable Gaussian splats, extract registered per-frame meshes, and build
animatable PCA blendshape models with landmark-driven retargeting."""

__version__ = "0.1.0"

from .geom import SE3, Camera, TriMesh, orbit_cameras, se3_apply, camera_project, vertex_normals, mesh_depth_render
from .splats import SplatSet, Splat2D, project_splat, render, render_backward, render_reference
from .rig import ControlRig, select_control_points, compute_blend_weights, lbs_deform, lbs_rotation_blend
from .nets import MlpParams, EncoderConfig, init_mlp, mlp_forward, mlp_backward, adam_step, fourier_encode
