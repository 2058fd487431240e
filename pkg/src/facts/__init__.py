"""Anonymous, threshold-gated complaint tallies for end-to-end encrypted messaging."""

from .ccbf import (
    BitTable,
    CcbfParams,
    IndexSet,
    IncrementOutcome,
    ParamError,
    derive_item_set,
    derive_user_set,
    increment,
    item_count,
    server_validate_index,
    test_count,
)
from .tags import ServerKeys, Tag, TagError, verify_tag
from .tipping import (
    TippingCalculator,
    check_preconditions,
    choose_params,
    intersection_prob,
    tail_thresholds,
    tipping_point,
)

__version__ = "0.1.0"
