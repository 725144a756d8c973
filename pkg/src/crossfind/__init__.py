"""Zero-shot cross-domain code search by fusing query-code, query-comment and
code-code similarity."""

from crossfind.core import (
    CodeSnippet,
    EmbeddingVector,
    FusionWeights,
    GeneratedCode,
    GeneratedComment,
    Query,
    RankedResult,
    SchemaScores,
    cosine_similarity,
    fuse_linear,
    rank_candidates,
    schema_scores,
)
from crossfind.indexer import CodebaseIndex, build_index, load_index, save_index
from crossfind.providers import ProviderSet
from crossfind.search import SearchRequest, SearchResponse, search, search_single_schema

__all__ = [
    "CodeSnippet",
    "CodebaseIndex",
    "EmbeddingVector",
    "FusionWeights",
    "GeneratedCode",
    "GeneratedComment",
    "ProviderSet",
    "Query",
    "RankedResult",
    "SchemaScores",
    "SearchRequest",
    "SearchResponse",
    "build_index",
    "cosine_similarity",
    "fuse_linear",
    "load_index",
    "rank_candidates",
    "save_index",
    "schema_scores",
    "search",
    "search_single_schema",
]
