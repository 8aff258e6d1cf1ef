"""Temporal-graph link prediction with attention-free token mixing.

Modules:
  numcore    float64 matrices, reverse-mode tape, gradient checks, Adam
  tgraph     event streams, chronological splits, strict-past neighbor store
  encoders   neighbor-token embedding (features + cosine time encoding)
  mixers     adaptive / pooling / MLP / attention token mixers, channel mixer
  model      end-to-end network, loss, checkpoints
  traineval  training loop, AP / AUC-ROC, evaluation protocol
  cli        ingest / train / eval / ablate / bench commands
"""

from .model import (  # noqa: F401
    ModelConfig,
    ModelParams,
    init_params,
    load_checkpoint,
    node_repr,
    predict_link,
    save_checkpoint,
)
from .tgraph import (  # noqa: F401
    EventStream,
    SyntheticSpec,
    TemporalStore,
    chronological_split,
    generate_synthetic,
    ingest_csv,
)
from .traineval import (  # noqa: F401
    MetricsReport,
    TrainConfig,
    auc_roc,
    average_precision,
    evaluate,
    train,
)

__version__ = "0.1.0"
