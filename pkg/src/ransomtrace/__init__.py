"""Early ransomware detection on synthetic encrypted-behavior traces.

The package generates labeled behavioral state traces, trains a residual
transition-prediction model whose pooled prediction errors drive a
calibrated classifier, and benchmarks it against a signature heuristic on
accuracy, detection latency, unseen-family generalization and robustness to
encryption speed.
"""

from .baseline import SignatureBaseline, fit_baseline
from .dynamics import DivergenceError
from .generator import (CompositionSpec, FamilyProfile, TRAINING_PROFILES,
                        UNSEEN_PROFILES, default_composition, gen_dataset,
                        gen_speed_set, gen_unseen_families)
from .model import (ModelParams, Threshold, TrainConfig, TransductionClassifier,
                    classify, classify_prefix, forward, init_params,
                    load_checkpoint, save_checkpoint, score_trace,
                    select_threshold, train)
from .preprocess import (LeakageError, NormStats, SplitSpec, Splits, denoise,
                         fit_stats, normalize, prep_pipeline, stratified_split)
from .evaluation import EvalReport, run_experiments, save_report
from .statespace import (ACTIONS, CHANNELS, Dataset, LABEL_BENIGN,
                         LABEL_RANSOMWARE, StateTrace, load_dataset, make_trace,
                         save_dataset, validate_trace)

__version__ = "0.1.0"
