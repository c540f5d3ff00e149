"""guidancelab: a desk-scale laboratory for diffusion guidance.

Analytic Gaussian-mixture worlds provide exact densities, scores, and noise
predictions at every diffusion step; tiny hand-backpropagated denoisers are
trained with condition dropout and fine-tuned onto narrow worlds; a
deterministic sampler drives any of four guided-noise combinations; and
two-sample metrics compare the results against the ground truth.  The
headline comparison: guiding with a fine-tuned model's own unconditional
prediction versus swapping in the unconditional prediction of the model it
was fine-tuned from.
"""

from .errors import (
    ConfigError,
    DegenerateTimeError,
    DimensionMismatchError,
    DivergenceError,
    EmptyConditionError,
    InvalidParameterError,
)
from .schedule import Schedule, build_schedule, forward_noise, tweedie_x0
from .mixtures import (
    GaussianMixture,
    exact_eps,
    log_density,
    marginal_at_t,
    narrow2,
    restrict,
    resolve_world,
    ring8,
    sample,
)
from .denoiser import (
    Batch,
    Denoiser,
    TrainConfig,
    eps_probe_error,
    finetune,
    init_denoiser,
    load_checkpoint,
    loss_and_grads,
    predict_eps,
    save_checkpoint,
    train,
)
from .guidance import (
    GuidanceSpec,
    NoiseSource,
    cfg_noise,
    dual_cfg_noise,
    dual_replacement_cfg_noise,
    guided_eps,
    network_source,
    oracle_source,
    replacement_cfg_noise,
)
from .sampler import (
    CLEAN,
    RunRecord,
    SamplerConfig,
    StepSnapshot,
    ddim_step,
    load_run_record,
    sample_run,
    save_run_record,
    timestep_subsequence,
)
from .metrics import (
    MetricReport,
    ModeReport,
    median_heuristic,
    metric_report,
    mmd_rbf,
    mode_report,
    sliced_wasserstein,
    wasserstein_1d,
)
from .config import ExperimentConfig, load_config, parse_config_text, resolve_out_dir
from .experiment import ExperimentResult, overhead_report, run_experiment
from .reporting import write_report, write_summary

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
