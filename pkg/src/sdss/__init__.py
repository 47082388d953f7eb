"""Multi-stage multi-treatment policy learning with smooth decision surrogates."""

__version__ = "0.1.0"

from .surrogates import (
    TauKind,
    KernelKind,
    SurrogateSpec,
    ConditionReport,
    phi_eval,
    phi_dis,
    gamma_eval_grad,
    psi_star_oracle,
    audit_conditions,
)
from .policies import (
    pred,
    trans,
    StageArch,
    PolicyArch,
    PolicyParams,
    build_layout,
    init_params,
    policy_scores,
    policy_decide,
    save_policy,
    load_policy,
)
from .datasets import (
    StageSpec,
    Trajectory,
    Dataset,
    EnvSpec,
    ValueEstimate,
    gen_scheme1,
    gen_scheme2,
    toy_dataset,
    generate,
    oracle_assign,
    oracle_policy,
    uniform_random_policy,
    mc_policy_value,
    with_reward_shift,
    stage_features,
    stage_feature_dim,
    save_dataset_csv,
    load_dataset_csv,
)
from .objective import (
    LossContext,
    WeightOverflowError,
    traj_loss_grad,
    minibatch_value_grad,
    surrogate_value_hat,
    ipw_value_estimate,
    ipw_value_hat,
)
from .optimizer import (
    OptimConfig,
    AdamState,
    FitResult,
    adam_update,
    sdss_fit,
    trace_to_csv,
)
from .baselines import (
    QStage,
    QModel,
    qlearn_linear_fit,
    save_qmodel,
    load_qmodel,
)
from .evaluation import (
    PropensityModel,
    fit_propensity_multinomial,
    NuisanceQ,
    fit_q_nuisance,
    aipw_value,
)
from .consistency import (
    TwoStageFiniteEnv,
    HingeSolution,
    hinge_solution,
    ExpLossReport,
    exp_loss_demo,
    SurfaceTable,
    toy_surface,
    toy_value_at,
)

__all__ = [
    "TauKind",
    "KernelKind",
    "SurrogateSpec",
    "ConditionReport",
    "phi_eval",
    "phi_dis",
    "gamma_eval_grad",
    "psi_star_oracle",
    "audit_conditions",
    "pred",
    "trans",
    "StageArch",
    "PolicyArch",
    "PolicyParams",
    "build_layout",
    "init_params",
    "policy_scores",
    "policy_decide",
    "save_policy",
    "load_policy",
    "StageSpec",
    "Trajectory",
    "Dataset",
    "EnvSpec",
    "ValueEstimate",
    "gen_scheme1",
    "gen_scheme2",
    "toy_dataset",
    "generate",
    "oracle_assign",
    "oracle_policy",
    "uniform_random_policy",
    "mc_policy_value",
    "with_reward_shift",
    "stage_features",
    "stage_feature_dim",
    "save_dataset_csv",
    "load_dataset_csv",
    "LossContext",
    "WeightOverflowError",
    "traj_loss_grad",
    "minibatch_value_grad",
    "surrogate_value_hat",
    "ipw_value_estimate",
    "ipw_value_hat",
    "OptimConfig",
    "AdamState",
    "FitResult",
    "adam_update",
    "sdss_fit",
    "trace_to_csv",
    "QStage",
    "QModel",
    "qlearn_linear_fit",
    "save_qmodel",
    "load_qmodel",
    "PropensityModel",
    "fit_propensity_multinomial",
    "NuisanceQ",
    "fit_q_nuisance",
    "aipw_value",
    "TwoStageFiniteEnv",
    "HingeSolution",
    "hinge_solution",
    "ExpLossReport",
    "exp_loss_demo",
    "SurfaceTable",
    "toy_surface",
    "toy_value_at",
]
