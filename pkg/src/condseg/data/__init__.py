from .acdc import AnnotationMissingError, list_subjects, load_acdc_subject, write_acdc_subject
from .preprocess import extract_slices, preprocess_volume, resample_volume, resize_slice, standardize_intensity
from .splits import FRACTIONS, make_splits, subsample_training
from .synthetic import PhantomConfig, generate_synthetic_dataset, write_synthetic_dataset
from .types import CorruptLabelsError, SliceSample, SplitPlan, VolumeSample
