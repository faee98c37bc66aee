"""Joint token/position diffusion with exact transport coupling."""

__version__ = "0.1.0"

from .coupling import (
    CouplingError,
    CouplingPlan,
    SlotClass,
    build_coupling,
    couple_balanced,
    couple_unbalanced,
    padded_classes,
    scale_targets,
)
from .diffusion import (
    NoiseSchedule,
    TauLeapDiagnostics,
    corrupt,
    fill_residual_masks,
    score_entropy_loss,
    tau_leap_step,
)
from .data import (
    CorpusSpec,
    CouplingCacheEntry,
    MaskSpec,
    apply_mask,
    generate_corpus,
    parse_grammar,
    precompute_couplings,
    read_cache,
    read_sequences,
    write_cache,
    write_sequences,
)
from .metrics import (
    EvalReport,
    MetricError,
    bleu,
    distinct_n,
    evaluate_corpus,
    evaluate_files,
    nist,
    success,
    success_rate,
)
from .model import Denoiser, DenoiserConfig, DenoiserOutput, load_checkpoint, save_checkpoint
from .positions import (
    PositionVector,
    euler_position_step,
    ground_positions,
    interpolate,
    position_loss,
    random_limit_positions,
    uniform_limit_positions,
)
from .sampling import (
    DiffusionState,
    PathTrace,
    SampleConfig,
    SampleResult,
    decode,
    init_state,
    sample,
)
from .training import (
    TrainConfig,
    Trainer,
    TrainStepReport,
    batched_score_entropy,
    train,
)
