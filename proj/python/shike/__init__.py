"""Long-tailed mixture-of-experts losses, training and diagnostics."""

from ._shike import (
    ConfigError,
    FormatError,
    InvalidArgument,
    Model,
    NumericError,
    ShapeError,
    ShikeError,
    ablation_rows,
    assign_depths,
    build_datasets,
    decouple_logits,
    default_config,
    evaluate_checkpoint,
    evaluate_logits,
    grand_teacher,
    hardest_negative,
    loss_bsce,
    loss_ce,
    loss_mutual,
    loss_nt,
    make_longtail_counts,
    parse_arrangement,
    run_ablation,
    softmax,
    split_divisions,
    train,
)

__version__ = "0.1.0"


def config(**overrides):
    """Default run config with the given keys replaced."""
    cfg = default_config()
    unknown = set(overrides) - set(cfg)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    cfg.update(overrides)
    return cfg
