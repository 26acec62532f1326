"""Listwise learning-to-rank with double attention over multiple embeddings.

The package ranks T candidates for a query represented by several embedding
channels: attention mixes the channels step by step, a decoder recurrence
summarizes the context trajectory, and a bilinear head scores the remaining
candidates at every selection step. Training uses teacher-forced softmax or
margin objectives with hand-derived gradients; inference uses beam search.
A bilinear-similarity baseline, episode-construction protocols, MAP/NDCG
metrics, and a finite-difference gradient checker round out the toolkit.
"""

__version__ = "0.1.0"

from .embeddings import (EmbeddingBundle, MlpEmbedder, load_bundle, mlp_forward,
                         random_mlp, read_emb1, save_bundle, synth_class_bundle,
                         synth_class_embedding, write_emb1)
from .episodes import (Dataset, ItemPool, QueryEpisode, build_cifar_style,
                       build_mnist_style, build_newsgroups_style, episode_bundle,
                       load_pool, read_dataset, save_pool, synth_class_pool,
                       write_dataset)
from .metrics import (MetricReport, aggregate_runs, average_precision,
                      evaluate_rankings, ndcg)
from .model import (AttentionState, JointChannel, JointEpisode, ModelDims,
                    RankerParams, RankingTrace, attention_step, decoder_step,
                    forward_episode, hinge_loss, init_params, joint_loss,
                    load_params, nll_loss, pool_query, pool_result_channel,
                    pool_results, save_params, score_candidates,
                    selection_distribution)
from .numerics import (derive_rng, grad_check, make_rng, stable_softmax,
                       tanh_affine)
from .oasis import OasisModel, oasis_rank, oasis_score, oasis_step, oasis_train
from .ranking import BeamPath, rank_beam, rank_exhaustive, rank_greedy
from .training import (TrainConfig, TrainLog, evaluate_oasis, evaluate_ranker,
                       param_norms, sweep_channels, train)
