"""Memory-budgeted structured pruning of transformer blocks for LLM serving."""

from .memory import BlockId, BlockKind, ModelSpec, Request, load_spec, peak_memory
from .surrogate import SurrogateModel, gen_surrogate, load_surrogate

__version__ = "0.1.0"

__all__ = [
    "BlockId",
    "BlockKind",
    "ModelSpec",
    "Request",
    "SurrogateModel",
    "gen_surrogate",
    "load_spec",
    "load_surrogate",
    "peak_memory",
]
