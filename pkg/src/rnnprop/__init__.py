"""Object proposals by learned hierarchical region merging.

An image is over-segmented, every region gets a hand-crafted descriptor, and
a small recursive network learns which neighbouring regions to merge and how
object-like each merged region is.  Proposals are the nodes of the resulting
merge trees, ranked by objectness.
"""

from ._accel import HAS_NUMBA
from .imagecore import GroundTruth, Image, LabelMask, SceneConfig, generate_scene, read_image, write_image
from .inference import MergePolicy, Proposal, generate_proposals, randomized_merge, top_k_sample
from .overseg import RegionGraph, Segmentation, build_region_graph, fh_segment
from .rnnmodel import MergeTree, ModelParams, init_params
from .training import TrainConfig, TrainExample, train

__version__ = "0.1.0"
