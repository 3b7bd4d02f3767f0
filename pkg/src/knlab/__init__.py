"""Knowledge-neuron laboratory: attribution, KN search, editing and tracing on toy transformers."""

__version__ = "0.1.0"

from .attribution import AttributionMap, Prompt, attribute, batch_attribute, mean_map
from .autodiff import Graph, Tensor, Trace, evaluate, gradient
from .causal_trace import NoiseSpec, RoleGrid, TraceGrid, TracePrompt, average_indirect_effect, trace
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .corpora import (AgreementSpec, EvalRecord, FactSpec, FactTuple, MinimalPair, build_symmetry_eval,
                      build_synonym_eval, gen_agreement_corpus, gen_fact_kb)
from .editing import categorical_accuracy, reliability, relative_effect, suppression_effect, ttest
from .exceptions import CheckpointError, DataError, KnLabError, NumericError, ShapeError
from .harness import EvalReport, MetricResult, emit_report, eval_symmetry, eval_synonym
from .kn_search import KNSet, SearchConfig, kn_frequency_table, refine_threshold
from .linalg import top_singular_value
from .localisation import layer_distribution, localisation_report, r_squared
from .lm import EditedModel, PromptModel
from .model import EditSpec, ModelConfig, NeuronRef, Override, TransformerLM
from .training import TrainSettings, train
from .vocab import Vocabulary
