"""Dataset model, manifests, balancing, batch sampling, synthesis, sequences, augmentation."""
from .arrays import ArrayDataset, frame_dataset, sequence_dataset
from .augment import AugmentConfig, augment, augment_batch
from .balance import balance_parts, balanced_pools, group_counts
from .frames import MissingFrameError, load_frames
from .records import AnnotationRecord, ManifestError, Part, load_manifest, write_manifest
from .sampling import BatchTriplet, TripletSampler, sample_batch_triplet
from .sequences import SEQ_LEN, SequenceSample, build_sequence_dataset
from .stores import (
    StoreFormatError,
    read_feature_store,
    read_image_store,
    write_feature_store,
    write_image_store,
)
from .synth import Corpus, SynthSpec, synthesize_corpus, write_corpus

__all__ = [
    "AnnotationRecord", "ArrayDataset", "AugmentConfig", "BatchTriplet", "Corpus", "ManifestError",
    "MissingFrameError", "Part", "SEQ_LEN", "SequenceSample", "StoreFormatError", "SynthSpec",
    "TripletSampler", "augment", "augment_batch", "balance_parts", "balanced_pools",
    "build_sequence_dataset", "frame_dataset", "group_counts", "load_frames", "load_manifest",
    "read_feature_store", "read_image_store", "sample_batch_triplet", "sequence_dataset",
    "synthesize_corpus", "write_corpus", "write_feature_store", "write_image_store", "write_manifest",
]
