"""Dynamic layer skipping on a toy transformer.

Per input and per layer, a small scoring network chooses whether to run a
layer at full precision, at simulated 8-bit or 4-bit precision, or to skip it
and pass a scaled copy of its input through. Modules:

* ``numerics``: activations, softmax, cosine similarity
* ``model``: the toy decoder with per-layer execution states
* ``calibration``: per-layer scale compensation factors
* ``profiler``: layer similarity and static-skip measurements
* ``policy``: the scoring network, sampling and greedy selection
* ``rewards``: differential rewards, REINFORCE and scorer training
* ``runtime``: synchronous and overlapped inference, budget targeting
* ``oracle``: exhaustive path enumeration, Pareto frontier, RandomSkip
* ``cli``: the ``dashskip`` command
"""

from .calibration import ScaleTable, compute_scale_table, scale_lookup
from .model import STATES, LayerState, ModelConfig, QuantSpec, ToyModel, fake_quantize, train_base_model
from .numerics import cosine_similarity, gelu, sigmoid, softmax_with_temperature
from .policy import ScorerParams, greedy_next_state, init_scorer, sample_next_state, score_candidates, temperature
from .runtime import DecisionTrace, PipelineReport, run_async, run_sync
from .tasks import TaskSpec, make_task

__version__ = "0.1.0"

__all__ = [
    "STATES", "LayerState", "ModelConfig", "QuantSpec", "ToyModel", "fake_quantize", "train_base_model",
    "ScaleTable", "compute_scale_table", "scale_lookup", "cosine_similarity", "gelu", "sigmoid",
    "softmax_with_temperature", "ScorerParams", "greedy_next_state", "init_scorer", "sample_next_state",
    "score_candidates", "temperature", "DecisionTrace", "PipelineReport", "run_async", "run_sync",
    "TaskSpec", "make_task",
]
