"""
seasonmatch: cross-season visual place recognition with metric-learned
image descriptors.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from .backbone import (
    build_model,
    descriptor,
    embed,
    embed_batch,
    embedding_model,
    extract_batch,
    extract_features,
    load_weights,
    read_descriptors,
    save_weights,
    write_descriptors,
)
from .dataset import (
    aligned_corpus,
    align,
    filter_frames,
    frame,
    load_traverse,
    make_partition,
    partition,
    place_labeling,
    same_place,
    synth_config,
    synth_corpus,
    traverse,
)
from .metric import (
    contrastive_loss,
    mine_pairs,
    mine_triplets,
    pair_sample,
    train,
    train_config,
    triplet_sample,
    wohlhart_lepetit_loss,
)
from .retrieval import (
    build_index,
    cross_season_matrix,
    descriptor_index,
    eval_report,
    fraction_correct,
    layer_sweep,
    match_result,
    precision_recall,
    query_nearest,
    same_condition_fc,
)
