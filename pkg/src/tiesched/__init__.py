"""Tail-aware request scheduling for LLM serving under heavy-tailed output lengths.

Modules: ``dist`` (log-t special functions, censored expectation and CVaR),
``fit`` (MLE, KS, tail statistics), ``workload`` (generators and traces),
``predictor`` (length predictors and prediction batching), ``sched``
(scores and the waiting queue), ``sim`` (serving simulator) and ``cli``.
"""

__version__ = "0.1.0"
