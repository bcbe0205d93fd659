"""RGB-hyperspectral fusion segmentation with bidirectional local cross-attention."""

from .config import RunConfig, build_model, parse_config
from .fusion import BCAFStage, FusionPlan
from .grouping import GroupedPatchEmbed, SpectralGrouping, compute_grouping
from .models import BCAFModel, HSISegModel, LogitFusionModel, RGBSegModel

__version__ = "0.1.0"
