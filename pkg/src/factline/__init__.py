"""factline: queue-driven clinical research data platform.

Ingest multimodal (synthetic) patient records through stateless workers into
an atomic, provenance-tracked warehouse; define variables interactively and
generate versioned machine-ready datasets with automatic statistics.
"""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    AtomicFact,
    ConceptRegistry,
    MappingScheme,
    SourceRecord,
    ValueKind,
    apply_mapping,
    canonicalize_boolean,
    validate_fact,
)
