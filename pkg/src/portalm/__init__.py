"""Language-model transfer learning for text screening classifiers, with
cross-demographic portability auditing on synthetic corpora."""

from .corpus import (
    AGE_BUCKETS,
    ConsistencyLabel,
    Corpus,
    Demographics,
    DepressionClass,
    Response,
    Session,
    StatsTable,
    Subject,
    binarize_phq,
    corpus_stats,
    label_subject_consistency,
    load_corpus,
    partition_speaker_disjoint,
    save_corpus,
    session_text,
)
from .errors import (
    ConfigError,
    CorpusFormatError,
    DegenerateInputError,
    MetricUndefinedError,
    PortalmError,
    TrainingDivergedError,
    ValidationError,
    VocabularyMismatchError,
)
from .finetune import (
    Classifier,
    ClassifierHead,
    FinetuneSchedule,
    discriminative_lrs,
    finetune_lm,
    predict_corpus,
    predict_session,
    stlr,
    train_classifier,
    unfreeze_plan,
)
from .lm import (
    LMConfig,
    LMParams,
    LMState,
    RegMasks,
    bptt_batches,
    corpus_token_stream,
    init_params,
    init_state,
    lm_forward,
    lm_loss,
    perplexity,
    sample_masks,
    train_lm,
)
from .metrics import (
    BootstrapCI,
    PredictionRecord,
    SubgroupReport,
    SubgroupRow,
    age_threshold_sweep,
    bootstrap_ci,
    consistency_split_eval,
    eer_operating_point,
    join_predictions,
    load_predictions_csv,
    regression_errors,
    roc_auc,
    roc_curve,
    roc_curve_area,
    subgroup_report,
    write_predictions_csv,
)
from .synth import Dist, SynthSpec, default_gp_spec, default_sp_spec, generate_corpus, gp_sp_pair
from .tokenizer import Vocabulary, build_vocab, denumericalize, numericalize, tokenize

__version__ = "0.1.0"
