from .client import ChatClient, ChatError, ChatRequest, MockClient
from .parse import is_permutation, parse_aspect_list, parse_descriptions, parse_ranking
from .pipeline import (
    CachedCaller,
    DescriptionSet,
    Pipeline,
    PipelineConfig,
    PipelineError,
    RankParseError,
    RankRecord,
    ResponseCache,
    Sample,
    SemanticAspect,
    describe,
    discover,
    modal_ranking,
    rank,
    run_pipeline,
    select_top_k,
)
from .templates import PromptTemplate, load_template, load_templates
