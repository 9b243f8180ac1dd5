"""Sparse mixture-of-experts training with temperature heating and dense pre-training.

Modules:

* :mod:`moeheat.schedule` -- temperature rescaling of task distributions and the heating schedule
* :mod:`moeheat.routing` -- balanced (capacitated) and greedy token-to-expert assignment
* :mod:`moeheat.nn` -- numpy network with hand-written gradients; dense-to-sparse conversion
* :mod:`moeheat.data` -- synthetic cipher tasks with Zipfian sizes, batch sampling
* :mod:`moeheat.trainer` -- two-phase training loop, validation, expert-usage metrics
* :mod:`moeheat.cli` -- ``moeheat`` command line
"""

from .data import Batch, Corpus, CorpusConfig, generate_corpus, sample_batch
from .nn import Model, ModelConfig, forward, gradient_check, loss_and_grad, sparsify
from .routing import Assignment, balanced_assign, brute_force_assign, greedy_assign, load_histogram
from .schedule import HeatingConfig, rescale, schedule_table, temperature_at
from .trainer import ExpertUsage, run, steps_to_target, usage_drift, usage_entropy, validate

__version__ = "0.1.0"
