"""Exchange-value credit assignment for multi-agent datasets.

Exact Shapley and Exchange values on tabulated games, plug-in estimation
from observed groups, EV-Clustering for anonymized data, selective behavior
cloning and a Tragedy-of-the-Commons simulator to exercise it all.
"""

from .errors import EvCreditError
from .game import (
    EXACT_LIMIT,
    AxiomReport,
    CharacteristicGame,
    CreditVector,
    check_axioms,
    exchange_constrained_exact,
    exchange_exact,
    load_game,
    save_game,
    shapley_exact,
    sv_to_ev,
)
from .estimation import (
    AgentEstimate,
    ClusterAssignment,
    EvReport,
    GroupObservation,
    ObservationSet,
    clustered_ev,
    clustered_value,
    estimate_all,
    estimate_ev,
    ev_cluster_search,
    load_observations,
    save_observations,
)
from .embedding import (
    BehaviorEmbedding,
    EmbeddingConfig,
    embed_ngram,
    embed_state_action,
    kmeans_cluster,
    select_by_ev_variance,
)
from .toc import Archetype, Dvf, TocConfig, TocTrajectory, archetype_action, generate_dataset, rollout, score, step
from .imitation import SelectionRule, TabularPolicy, evaluate_policy, fit_bc, fit_group_bc, select_agents

__version__ = "0.1.0"
