"""Canonical GL(r)-invariant representations for LoRA checkpoints.

Library layout:

- interchange: LWC1/LWC-C checkpoint files, manifests, collection access
- canon: QR-SVD canonical decomposition, GL(r) sampling, equivalence benchmarks
- nn: minimal reverse-mode tensor engine, AdamW, schedules
- encoder: hierarchical weight-token transformer, training, baselines
- synthgen: seeded synthetic collections with planted recoverable signal
- evaluation: classification / regression / retrieval metrics and study drivers
- cli: the `w2t` command line entry point
"""

__version__ = "0.1.0"

from .canon import (  # noqa: F401
    CanonicalUpdate,
    EquivReport,
    GlTransform,
    apply_gl,
    bench_equivalence,
    canonize,
    compare_canonical,
    core_matrix,
    dense_svd_oracle,
    sample_gl,
)
from .interchange import (  # noqa: F401
    CollectionManifest,
    FactorPair,
    Label,
    LoraCheckpoint,
    ModuleKind,
    PositionKey,
    load_collection,
    read_checkpoint,
    write_checkpoint,
)
