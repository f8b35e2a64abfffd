"""Background-consistent re-encoding: conceal an object from transformer
vision encoders by re-encoding its tokens as background, without the
representational gaps that make suppression attacks hallucinate.
"""

__version__ = "0.1.0"

from .core import (
    AttackConfig,
    AttackResult,
    ImageTensor,
    RoiSpec,
    default_config,
    validate_image,
)
from .roi import PixelMask, TokenPartition, build_pixel_mask, partition_tokens
from .encoder import (
    EncoderDescriptor,
    LayerFeatureSet,
    ToyEncoder,
    create_encoder,
    extract_features,
    list_adapters,
    register_adapter,
    toy_encoder,
)
from .losses import (
    LossBreakdown,
    composite_loss,
    dictionary_loss,
    preservation_loss,
    soft_assignment,
    stat_loss,
    tv_loss,
)
from .attack import blur_roi, linf_project_and_clamp, mask_roi, run_bcr_attack
from .metrics import (
    CaptionObjectSet,
    LexiconExtractor,
    MetricsReport,
    concealment_success,
    extract_objects,
    global_preservation,
    head_noun,
    object_set,
    perceptual_distance,
    semantic_drift,
    ssim,
)
from .grounding import (
    FixtureGroundingClient,
    GroundingVerdict,
    HttpGroundingClient,
    StubGroundingService,
    candidate_hallucinations,
    grounded_hallucination_rate,
    verify_object,
)
from .experiment import (
    DatasetManifest,
    ExperimentReport,
    emit_plots,
    load_image,
    load_manifest,
    run_attack_batch,
    run_layer_sweep,
    save_image,
    write_report,
)

__all__ = [name for name in dir() if not name.startswith("_")]
