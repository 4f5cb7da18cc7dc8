"""Reversible pseudonymization of prompts sent to hosted language models.

Privacy entities are detected, given semantically compatible substitutes,
and swapped out before text leaves the machine; the model's answer is then
mapped back to the original entities.
"""

from .detection import Gazetteer, detect_gazetteer, detect_prompt, parse_tag_marked, align_tag_replaced
from .generation import CandidatePool, GenerationSession, generate_prompt, generate_random
from .models import (
    EntityCategory,
    EntityOccurrence,
    EntitySet,
    PseudonymizedText,
    ReplacementMapping,
    ReplacementPair,
)
from .pipeline import BackendSet, MappingSession, PipelineConfig, pseudonymize, pseudonymize_many, restore_output
from .replacement import SetMatch, TagMatch, replace_direct, replace_generative, replace_prompt

__version__ = "0.1.0"

__all__ = [
    "BackendSet",
    "CandidatePool",
    "EntityCategory",
    "EntityOccurrence",
    "EntitySet",
    "Gazetteer",
    "GenerationSession",
    "MappingSession",
    "PipelineConfig",
    "PseudonymizedText",
    "ReplacementMapping",
    "ReplacementPair",
    "SetMatch",
    "TagMatch",
    "align_tag_replaced",
    "detect_gazetteer",
    "detect_prompt",
    "generate_prompt",
    "generate_random",
    "parse_tag_marked",
    "pseudonymize",
    "pseudonymize_many",
    "replace_direct",
    "replace_generative",
    "replace_prompt",
    "restore_output",
]
