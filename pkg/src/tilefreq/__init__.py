"""Frequency-domain tile features, LSH neighbors and multi-label training at desk scale."""

from .codec import (
    CoeffBlock,
    SeriesCoeffs,
    aug_flip_cols,
    aug_flip_rows,
    aug_rot90,
    aug_transpose,
    dct1d,
    dct2d,
    idct1d,
    idct2d,
    lowpass1d_rowmajor,
    lowpass2d,
    reconstruct,
    ts_compress,
)
from .data import (
    LabelMatrix,
    SurveyRecord,
    SynthConfig,
    aggregate_species_in_radius,
    build_label_matrix,
    parse_metadata,
    synth_generate,
)
from .evaluate import decode_threshold, decode_topk, micro_f1, write_submission
from .losses import asl, bce_with_logits, finite_diff_check, hill, sigmoid_f1, triplet
from .lsh import LshIndex, LshParams, build, knn_predict, sample_triplets
from .models import backward, forward, geo_noise, init_params
from .projection import project_to_laea
from .training import TrainConfig, train_classifier, train_tile2vec

__version__ = "0.1.0"
