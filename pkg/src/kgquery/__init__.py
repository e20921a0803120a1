"""Complex logical query answering over knowledge graphs.

Symbolic side: graphs, the thirteen EPFO query structures, exact answer
sets, dataset generation. Neural side: linearized query text, a small
transformer encoder with attention intersection and maxout union, and the
contrastive + classification training loop.
"""

from kgquery.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DomainError,
    KGQueryError,
    NumericError,
    ParseError,
    SamplingExhausted,
    SplitError,
    StructureError,
    TruncationError,
    UnknownNameError,
)
from kgquery.graph import KnowledgeGraph, load_graph, project
from kgquery.queries import QueryGraph, QueryType, evaluate, random_query, transform_union_projection

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DomainError",
    "KGQueryError",
    "KnowledgeGraph",
    "NumericError",
    "ParseError",
    "QueryGraph",
    "QueryType",
    "SamplingExhausted",
    "SplitError",
    "StructureError",
    "TruncationError",
    "UnknownNameError",
    "evaluate",
    "load_graph",
    "project",
    "random_query",
    "transform_union_projection",
]
