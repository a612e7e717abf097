"""starlab: a desk-scale lab for AR vs. masked-diffusion models on star-graph planning."""

from .errors import ConfigError
from .stargraph import (
    Instance,
    InstanceStream,
    StarGraph,
    StarSpec,
    TaskVariant,
    TestSet,
    Vocabulary,
    build_testset,
    count_distinct_instances,
    exact_match,
    fingerprint,
    load_testset,
    oracle_path,
    parse_prefix,
    sample_graph,
    save_testset,
    serialize,
    testset_score,
)

__version__ = "0.1.0"
