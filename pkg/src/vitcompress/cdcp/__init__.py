from .compactor import (
    KINDS,
    Compactor,
    assemble_grad,
    compactor_grad,
    insert_compactors,
    masked_count,
    reset_masks,
    zero_columns,
)
from .fold import FoldResult, fold, prune_model
from .report import PruneReport, build_prune_report
from .selection import (
    ChannelRef,
    MinimumRetentionError,
    PruneState,
    ScoreBoard,
    SelectionError,
    attention_consistency_expand,
    channel_state,
    head_consistency_expand,
    pruned_columns,
    select_channels,
    state_from_masks,
)

__all__ = [
    "KINDS", "Compactor", "assemble_grad", "compactor_grad", "insert_compactors", "masked_count",
    "reset_masks", "zero_columns", "FoldResult", "fold", "prune_model", "PruneReport",
    "build_prune_report", "ChannelRef", "MinimumRetentionError", "PruneState", "ScoreBoard",
    "SelectionError", "attention_consistency_expand", "channel_state", "head_consistency_expand",
    "pruned_columns", "select_channels", "state_from_masks",
]
