"""Saver/base inference cascades: saver selection, threshold calibration and replayable execution."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BackendError,
    DataError,
    DomainError,
    DuplicateIdError,
    EmptyLogError,
    EmptySubsetError,
    JoinError,
    ParseError,
)
from .ingest import (  # noqa: E402
    ModelLog,
    ModelProfile,
    PairedDataset,
    PredictionRecord,
    detection_confidence,
    join_logs,
    load_profiles,
    parse_log,
    serialize_log,
)
from .metrics import (  # noqa: E402
    delta_c,
    expected_cascade_cost,
    expected_moe_cost,
    loss_weight,
    router_breakeven_cost,
)
from .multiexit import ChainConfig, ExitChain, chain_eval, chain_search  # noqa: E402
from .runtime import ExternalProcessBackend, ReplayBackend, run_cascade  # noqa: E402
from .selection import (  # noqa: E402
    NO_EXIT,
    budget_table,
    cascade_eval,
    exit_ratio,
    find_r_match,
    rank_savers,
    subset_curve,
    subset_performance,
    threshold_sweep,
)
