from .backbones import (Backbone, BackboneHandle, available_backbones, build_backbone, extractor_hash,
                        init_head, reinit_classifier, register_backbone, state_hash)
from .engine import (DEFAULT_LR_GRID, ConfigError, LRSelection, LRSelectionError, MixupConfig, NonFiniteLossError,
                     PipelineConfig, PipelineKind, PipelineRun, StageConfig, StageResult, cosine_lr, evaluate,
                     fine_tune_stage, holdout_split, load_checkpoint, make_pipeline, mixup_batch, predict_proba, run_pipeline,
                     sample_mixup_lambda, save_checkpoint, select_lr, write_run_dir)
