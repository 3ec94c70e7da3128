"""Document souping for selective state-space models.

Documents are encoded independently into fixed-size per-layer states, pooled
with a commutative operator, and a question is decoded from the pooled state.
"""

__version__ = "0.1.0"

from .souping import SoupConfig, pool_states, soup_encode
from .ssm import ModelConfig, ModelState, SSMModel, init_model, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig",
    "ModelState",
    "SSMModel",
    "SoupConfig",
    "init_model",
    "load_checkpoint",
    "pool_states",
    "save_checkpoint",
    "soup_encode",
]
