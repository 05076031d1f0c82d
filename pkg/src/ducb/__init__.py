"""D-UCB: contextual bandits with stochastic experts and shared importance-sampled estimates."""
from .bounds import (GapProfile, BoundReport, lambda_mu, instance_term_ducb, instance_term_ucb1,
                     theorem_bound, corollary_delta_bound, corollary_simple_bound,
                     sample_gap_profile, lambda_expectation_check, progressive_validation_loss)
from .divergence import (DivergenceMatrix, conditional_f_divergence, m_divergence, sigma_divergence,
                         exact_divergences, empirical_divergences)
from .env import TabularEnvironment, DatasetEnvironment, EndOfStream, RoundOutcome, true_expert_mean
from .estimators import (SampleLog, ClippedConfig, MoMConfig, ExpertIndex, z_weight, solve_beta,
                         clipped_estimate, clipped_index, partition_groups, group_mean,
                         mom_estimate, mom_index, ClippedIndexer, MoMIndexer)
from .experiment import RunConfig, run_experiment
from .experts import (TabularExpert, SoftmaxExpert, ExpertPool, OracleConfig, TrainingExample,
                      sample_arm, train_oracle, spawn_batch_experts)
from .instances import make_mixture_instance, identical_instance
from .policies import (DUCB, UCB1, EpsilonGreedy, ExploreFirst, EpisodeTrace, RoundRecord,
                       batched_run, simulate, make_policy)

__version__ = "0.1.0"
