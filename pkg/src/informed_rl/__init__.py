"""Average-reward tabular MDP lab: informed posterior sampling, randomized-loss RL and a regret harness."""

from .envs import GenerationError, ParameterFamily, family_around, golden_family, make_random_family, make_riverswim
from .expert import (
    Competence,
    EstimationError,
    OfflineDataset,
    entropy_beta_estimate,
    expert_policy,
    generate_offline,
    majority_estimator,
)
from .harness import (
    BoundReport,
    ConfigError,
    ExpertConfig,
    RegretReport,
    control_variate_regret,
    cumulative_regret,
    draw_member,
    estimate_epsilon,
    expert_dataset,
    lemma2_check,
    mismatch_by_episode,
    run_experiment,
    stream,
    theorem1_bound,
)
from .ipsrl import EpisodeSchedule, RunTrace, run_ipsrl, schedule_lengths
from .irlsvi import (
    LossHyper,
    LossRealization,
    OptimizationError,
    OptimOptions,
    QParams,
    build_loss,
    loss_value_and_grad,
    minimize_loss,
    run_irlsvi,
    running_avg,
    td_error,
)
from .mdp import (
    ConvergenceError,
    DeterministicPolicy,
    EvaluationError,
    Mdp,
    PlanSolution,
    StochasticPolicy,
    ValidationError,
    action_gap,
    bias_span,
    is_communicating,
    policy_gain,
    solve_avg_reward,
)
from .posterior import (
    InconsistentEvidenceError,
    ModelMismatchWarning,
    PosteriorState,
    informed_prior,
    mismatch_probability,
    online_update,
    sample_member,
)

__version__ = "0.1.0"
