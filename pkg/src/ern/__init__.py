"""Integer-only inference engine for binary-weight, 2-bit-activation
residual networks: thermometer pixel embedding, popcount convolution,
threshold-folded batch norm, and a float oracle to certify all of it.
"""

from .compiler import (
    CheckpointManifest,
    CompiledModel,
    compile_checkpoint,
    gen_random_checkpoint,
    load,
    load_manifest,
    save_manifest,
    serialize,
)
from .errors import (
    BadMagicError,
    ChecksumError,
    CompileError,
    ConfigError,
    DomainError,
    ErnError,
    FormatError,
    ShapeError,
    TruncationError,
    VerificationError,
    VersionError,
)
from .graph import (
    ARCHITECTURES,
    ArchConfig,
    GraphDef,
    arch_config,
    build_model,
    execute,
    model_stats,
    trace_shapes,
)
from .oracle import cross_check, oracle_from_manifest, oracle_execute
from .pixembed import encode_image, thermo_params
from .quant import apply_thresholds, binarize_weights, fuse_thresholds

__version__ = "0.1.0"

__all__ = [
    "ARCHITECTURES",
    "ArchConfig",
    "BadMagicError",
    "CheckpointManifest",
    "ChecksumError",
    "CompileError",
    "CompiledModel",
    "ConfigError",
    "DomainError",
    "ErnError",
    "FormatError",
    "GraphDef",
    "ShapeError",
    "TruncationError",
    "VerificationError",
    "VersionError",
    "apply_thresholds",
    "arch_config",
    "binarize_weights",
    "build_model",
    "compile_checkpoint",
    "cross_check",
    "encode_image",
    "execute",
    "fuse_thresholds",
    "gen_random_checkpoint",
    "load",
    "load_manifest",
    "model_stats",
    "oracle_execute",
    "oracle_from_manifest",
    "save_manifest",
    "serialize",
    "thermo_params",
    "trace_shapes",
    "__version__",
]
