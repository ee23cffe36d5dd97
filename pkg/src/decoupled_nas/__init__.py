"""Neural architecture search with decoupled structure and operation policies."""
from .policy import PolicySet, init_policy_set, log_prob, reinforce_grad, sample_architecture, sample_model
from .searchspace import (
    ArchitectureSample,
    CellTemplate,
    count_architectures,
    enumerate_edge_combinations,
    make_conv_template,
    make_recurrent_template,
    validate_sample,
)

__version__ = "0.1.0"
