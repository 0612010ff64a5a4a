"""CPU speculative decoding with draft trees, paged KV caching, and
multi-round speculative sampling, plus draft-model distillation."""

from .drafttree import (DispatchTable, TreeSpec, build_chain, build_full_tree,
                        dispatch, parse_tree)
from .engine import (DecodeSession, Engine, EngineConfig, StageMetrics,
                     config_from_dict, models_from_dict)
from .kvstore import (FlatKvCache, HiddenTape, PagedKvCache, PersistentKvStore,
                      block_keys)
from .model import (ModelConfig, ModelParams, forward, init_base, init_draft,
                    load_pair, make_oracle_draft, quantize_ffn, save_pair)
from .sampling import (DraftResult, GuidedFsm, MssResult, SamplerConfig,
                       mss_verify, parse_fsm, target_dist)

__version__ = "0.1.0"

__all__ = [
    "DispatchTable", "TreeSpec", "build_chain", "build_full_tree",
    "dispatch", "parse_tree",
    "DecodeSession", "Engine", "EngineConfig", "StageMetrics",
    "config_from_dict", "models_from_dict",
    "FlatKvCache", "HiddenTape", "PagedKvCache", "PersistentKvStore",
    "block_keys",
    "ModelConfig", "ModelParams", "forward", "init_base", "init_draft",
    "load_pair", "make_oracle_draft", "quantize_ffn", "save_pair",
    "DraftResult", "GuidedFsm", "MssResult", "SamplerConfig",
    "mss_verify", "parse_fsm", "target_dist",
    "__version__",
]
