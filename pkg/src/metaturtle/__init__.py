"""Meta-learning for few-shot sine regression: MAML, a meta-learner LSTM and TURTLE.

Everything runs on a small reverse-mode autodiff engine (``metaturtle.autodiff``)
that supports gradients of gradients.
"""
from .errors import ConfigError, DivergenceError, GradientError, MetaTurtleError, NonFiniteError, ShapeError
from .harness import ExperimentConfig, aggregate, grid_search, run_experiment, train_run
from .learners import (AdamState, LstmMetaConfig, LstmMetaParams, MamlConfig, TurtleConfig, TurtleParams,
                       lstm_adapt, maml_adapt, make_learner, outer_step, theorem1_construct, turtle_adapt)
from .network import SINE_SPEC, MlpSpec, ParamSet, flatten, forward, init_params, unflatten
from .tasks import SineTask, TaskStream, make_streams, sample_task

__version__ = "0.1.0"
