"""Co-clustered federated recommendation, simulated in a single process.

Clients train item embeddings and a private score function on their own
interactions. Each round the server clusters the aggregated item embeddings,
groups clients by similarity on one item category and sends the group model
only to the similar group.
"""
from .clustering import ItemMembership, KMeansResult, category_items, kmeans
from .dataset import (
    DataError,
    EvalCandidates,
    InteractionDataset,
    RawRating,
    build_eval_candidates,
    build_splits,
    inject_virtual_ratings,
    load_movielens,
    sample_train_negatives,
)
from .evaluation import evaluate, hr_at_k, ndcg_at_k, rank_test_item
from .federation import (
    ABLATION_MODES,
    ClientState,
    Federation,
    RoundConfig,
    RunReport,
    ServerState,
    ablation_mode,
    diagnose_client_kmeans,
    run,
)
from .model import (
    LossConfig,
    ScoreFunction,
    bce_loss,
    item_similarity_loss,
    local_train,
    predict,
    scl_loss,
)
from .partition import GroupSplit, SimilarityScores, elbow_split, global_aggregate, group_aggregate, similarity_scores

__version__ = "0.1.0"
