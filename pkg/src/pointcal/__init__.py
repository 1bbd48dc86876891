"""Probabilistic point-cloud embeddings with calibration evaluation.

Per-point Gaussian embedding models (diagonal and low-rank covariance),
the probabilistic triplet loss that trains them, triplet samplers for
segmentation and matching, synthetic desk-scale tasks, baseline
uncertainty methods, and calibration metrics (ECE, reliability diagrams),
all behind a deterministic CLI.
"""

from .embeddings import (DiagGaussianEmbeddings, LowRankGaussianEmbeddings,
                         PointCloud, TripletGaussian, correspondence_uncertainty,
                         extract_triplet, point_uncertainties, point_uncertainty,
                         sample_embeddings)
from .moments import (QuadraticForm, TauMoments, mc_tau_moments,
                      mc_triplet_probability, metric_loss, per_dim_moments,
                      quadratic_form_moments, tau_moments_diag, tau_moments_lowrank,
                      triplet_probability)
from .network import NetConfig, NetParams, forward, forward_dropout, freeze, sgd_step
from .rng import Rng
from .sampling import (CorrespondenceSet, RigidTransform, TripletBatch,
                       find_correspondences, knn, sample_cem, sample_ces)
from .scenes import PairConfig, SceneConfig, gen_matching_pair, gen_segmentation_scene
from .training import TrainReport, train_baseline_au, train_matching, train_segmentation

__version__ = "0.1.0"
