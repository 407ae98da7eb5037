"""Dynamic surfaces as pose-conditioned offset and texture maps over a template mesh.

Training goes through a volumetric renderer; inference rasterises the
deformed template and queries the texture once per covered pixel.
"""

from .autodiff import Tape, Var
from .conversion import sdf_to_density, signed_distance
from .fields import FieldConfig, FieldModel, load_checkpoint, save_checkpoint
from .geometry import TemplateMesh, capsule, icosphere, make_template, project_points, read_obj, write_obj
from .raster import UvImage, edit_texture, rasterize, render_rr
from .training import (SceneSpec, SyntheticScene, TrainConfig, benchmark, evaluate, generate_scene, load_scene,
                       psnr, ssim, train)
from .volren import Camera, composite, render_image_vr, render_pixel_vr

__version__ = "0.1.0"
